use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{Direction, EcmError, EcmParams, Soc};

const CHARGING_CSV: &str = include_str!("../../data/charging.csv");
const DISCHARGING_CSV: &str = include_str!("../../data/discharging.csv");

pub(crate) const TABLE_HEADER: [&str; 6] =
    ["soc_pct", "r0_mohm", "r1_mohm", "c1_kf", "r2_mohm", "c2_kf"];

/// One row of a parameter table file, in the file's units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub soc_pct: f64,
    pub r0_mohm: f64,
    pub r1_mohm: f64,
    pub c1_kf: f64,
    pub r2_mohm: f64,
    pub c2_kf: f64,
}

impl TableRow {
    pub fn to_breakpoint(&self) -> Result<Breakpoint, EcmError> {
        let params = EcmParams::new(
            self.r0_mohm / 1e3,
            self.r1_mohm / 1e3,
            self.c1_kf * 1e3,
            self.r2_mohm / 1e3,
            self.c2_kf * 1e3,
        )?;
        Ok(Breakpoint {
            soc: self.soc_pct / 100.0,
            params,
        })
    }

    pub fn from_breakpoint(bp: &Breakpoint) -> TableRow {
        let p = &bp.params;
        TableRow {
            soc_pct: bp.soc * 100.0,
            r0_mohm: p.r0 * 1e3,
            r1_mohm: p.r1 * 1e3,
            c1_kf: p.c1 / 1e3,
            r2_mohm: p.r2 * 1e3,
            c2_kf: p.c2 / 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakpoint {
    pub soc: f64,
    pub params: EcmParams,
}

/// Circuit parameters tabulated against SoC for one current direction.
///
/// Breakpoints are strictly ascending and span `[0, 1]`; values in between
/// are interpolated linearly, parameter by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    direction: Direction,
    rows: Vec<Breakpoint>,
}

impl ParamTable {
    pub fn new(direction: Direction, rows: Vec<Breakpoint>) -> Result<Self, EcmError> {
        if rows.len() < 2 {
            return Err(EcmError::Table(format!(
                "need at least two breakpoints, got {}",
                rows.len()
            )));
        }
        for w in rows.windows(2) {
            if !(w[1].soc > w[0].soc) {
                return Err(EcmError::Table(format!(
                    "breakpoints not strictly ascending at soc {}",
                    w[1].soc
                )));
            }
        }
        let first = rows[0].soc;
        let last = rows[rows.len() - 1].soc;
        if first != 0.0 || last != 1.0 {
            return Err(EcmError::Table(format!(
                "breakpoints must cover 0 and 1, got [{first}, {last}]"
            )));
        }
        for bp in &rows {
            bp.params.validate()?;
        }
        Ok(ParamTable { direction, rows })
    }

    /// Builds a table from rows that may not reach SoC 0 or 1, holding the
    /// first and last rows constant out to the ends.
    pub fn padded(direction: Direction, mut rows: Vec<Breakpoint>) -> Result<Self, EcmError> {
        if let Some(first) = rows.first().copied() {
            if first.soc > 0.0 {
                rows.insert(0, Breakpoint { soc: 0.0, ..first });
            }
        }
        if let Some(last) = rows.last().copied() {
            if last.soc < 1.0 {
                rows.push(Breakpoint { soc: 1.0, ..last });
            }
        }
        ParamTable::new(direction, rows)
    }

    /// Same parameters at every 10 % breakpoint.
    pub fn uniform(direction: Direction, params: EcmParams) -> Result<Self, EcmError> {
        let rows = (0..=10)
            .map(|k| Breakpoint {
                soc: k as f64 / 10.0,
                params,
            })
            .collect();
        ParamTable::new(direction, rows)
    }

    /// Charging table of the 100 Ah reference battery.
    pub fn reference_charging() -> Self {
        ParamTable::from_csv_str(Direction::Charging, CHARGING_CSV)
            .expect("bundled charging table is valid")
    }

    /// Discharging table of the 100 Ah reference battery.
    pub fn reference_discharging() -> Self {
        ParamTable::from_csv_str(Direction::Discharging, DISCHARGING_CSV)
            .expect("bundled discharging table is valid")
    }

    pub fn reference(direction: Direction) -> Self {
        match direction {
            Direction::Charging => Self::reference_charging(),
            Direction::Discharging => Self::reference_discharging(),
        }
    }

    pub fn read_rows<R: Read>(reader: R) -> Result<Vec<TableRow>, EcmError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| EcmError::TableParse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.iter().ne(TABLE_HEADER.iter().copied()) {
            return Err(EcmError::TableParse {
                line: 1,
                msg: format!("expected header `{}`", TABLE_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<TableRow>() {
            let row = rec.map_err(|e| EcmError::TableParse {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn from_reader<R: Read>(direction: Direction, reader: R) -> Result<Self, EcmError> {
        let rows = Self::read_rows(reader)?
            .iter()
            .map(TableRow::to_breakpoint)
            .collect::<Result<Vec<_>, _>>()?;
        ParamTable::new(direction, rows)
    }

    pub fn from_csv_str(direction: Direction, text: &str) -> Result<Self, EcmError> {
        Self::from_reader(direction, text.as_bytes())
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn rows(&self) -> &[Breakpoint] {
        &self.rows
    }

    /// Piecewise-linear interpolation; breakpoints return the stored values
    /// unchanged.
    pub fn lookup(&self, s: Soc) -> EcmParams {
        let s = s.value();
        let idx = self.rows.partition_point(|bp| bp.soc < s);
        if idx < self.rows.len() && self.rows[idx].soc == s {
            return self.rows[idx].params;
        }
        // s lies strictly inside (rows[idx-1].soc, rows[idx].soc).
        let lo = &self.rows[idx - 1];
        let hi = &self.rows[idx];
        let w = (s - lo.soc) / (hi.soc - lo.soc);
        let lerp = |a: f64, b: f64| a + w * (b - a);
        EcmParams {
            r0: lerp(lo.params.r0, hi.params.r0),
            r1: lerp(lo.params.r1, hi.params.r1),
            c1: lerp(lo.params.c1, hi.params.c1),
            r2: lerp(lo.params.r2, hi.params.r2),
            c2: lerp(lo.params.c2, hi.params.c2),
        }
    }

    pub fn try_lookup(&self, s: f64) -> Result<EcmParams, EcmError> {
        Soc::new(s).map(|s| self.lookup(s))
    }

    pub fn to_rows(&self) -> Vec<TableRow> {
        self.rows.iter().map(TableRow::from_breakpoint).collect()
    }
}

/// Serializes rows in the table file schema. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_table_rows(rows: &[TableRow]) -> String {
    let mut out = TABLE_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.soc_pct, r.r0_mohm, r.r1_mohm, r.c1_kf, r.r2_mohm, r.c2_kf
        ));
    }
    out
}
