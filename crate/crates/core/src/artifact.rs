//! Versioned text artifacts for pipeline stages.
//!
//! ```text
//! d2c-artifact 1
//! kind policy
//! field benchmark cartpole
//! block states 3 2
//! 0e0 1.5e0
//! ...
//! end
//! ```
//!
//! Floats are written in shortest round-trip exponent form, so reading and
//! rewriting a file reproduces it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::feedback::{FeedbackPolicy, KalmanSolution};
use crate::numerics::{Matrix, Vector};
use crate::openloop::IterationRecord;
use crate::sysid::LtvRom;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "d2c-artifact";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Artifact {
    pub kind: String,
    pub fields: Vec<(String, String)>,
    pub blocks: Vec<(String, Matrix)>,
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Artifact {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn field(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value,
            None => self.fields.push((key.into(), value)),
        }
    }

    pub fn push(&mut self, name: &str, m: Matrix) {
        self.blocks.push((name.into(), m));
    }

    pub fn push_all<'a>(&mut self, name: &str, ms: impl IntoIterator<Item = &'a Matrix>) {
        for m in ms {
            self.push(name, m.clone());
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Config(format!("{} artifact has no field '{key}'", self.kind)))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{} artifact field '{key}' has invalid value '{raw}'", self.kind)))
    }

    pub fn blocks(&self, name: &str) -> Vec<&Matrix> {
        self.blocks.iter().filter(|(n, _)| n == name).map(|(_, m)| m).collect()
    }

    pub fn block(&self, name: &str) -> Result<&Matrix> {
        match self.blocks(name).as_slice() {
            [m] => Ok(m),
            found => Err(Error::Config(format!(
                "{} artifact needs exactly one '{name}' block, found {}",
                self.kind,
                found.len()
            ))),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Config(format!("expected a {kind} artifact, found {}", self.kind)))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC} {FORMAT_VERSION}").unwrap();
        writeln!(out, "kind {}", self.kind).unwrap();
        for (k, v) in &self.fields {
            writeln!(out, "field {k} {v}").unwrap();
        }
        for (name, m) in &self.blocks {
            writeln!(out, "block {name} {} {}", m.nrows(), m.ncols()).unwrap();
            for row in m.row_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, reason: String| Error::Parse { line, reason };
        let (n, first) = lines.next().ok_or_else(|| err(1, "empty artifact".into()))?;
        match first.split_once(' ') {
            Some((MAGIC, v)) if v == FORMAT_VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(err(n, format!("unsupported format version {v}"))),
            _ => return Err(err(n, format!("expected '{MAGIC} {FORMAT_VERSION}' header"))),
        }
        let (n, kind_line) = lines.next().ok_or_else(|| err(2, "missing kind line".into()))?;
        let kind = kind_line
            .strip_prefix("kind ")
            .filter(|k| is_token(k))
            .ok_or_else(|| err(n, "expected 'kind <name>'".into()))?;
        let mut art = Artifact::new(kind);
        let mut last = n;
        while let Some((n, line)) = lines.next() {
            last = n;
            if line == "end" {
                if let Some((n, _)) = lines.find(|(_, l)| !l.is_empty()) {
                    return Err(err(n, "content after 'end'".into()));
                }
                return Ok(art);
            }
            if let Some(rest) = line.strip_prefix("field ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                if !is_token(k) {
                    return Err(err(n, "field needs a key".into()));
                }
                art.fields.push((k.into(), v.into()));
            } else if let Some(rest) = line.strip_prefix("block ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(err(n, "expected 'block <name> <rows> <cols>'".into()));
                };
                let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| err(n, format!("invalid dimension '{s}'")));
                let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let (n, row) = lines
                        .next()
                        .ok_or_else(|| err(n + r + 1, format!("block '{name}' is missing row {r}")))?;
                    last = n;
                    let values: Vec<&str> = if row.is_empty() { Vec::new() } else { row.split(' ').collect() };
                    if values.len() != cols {
                        return Err(err(n, format!("block '{name}' row {r} has {} values, expected {cols}", values.len())));
                    }
                    for v in values {
                        data.push(v.parse::<f64>().map_err(|_| err(n, format!("invalid number '{v}'")))?);
                    }
                }
                art.blocks.push((name.into(), Matrix::from_row_slice(rows, cols, &data)));
            } else {
                return Err(err(n, format!("unexpected line '{line}'")));
            }
        }
        Err(err(last + 1, "missing 'end'".into()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// CSV with a header row; floats in shortest round-trip form.
pub fn csv<R: AsRef<[f64]>>(header: &[&str], rows: impl IntoIterator<Item = R>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.as_ref().iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn stack_rows(vs: &[Vector]) -> Matrix {
    let cols = vs.first().map_or(0, |v| v.len());
    Matrix::from_fn(vs.len(), cols, |r, c| vs[r][c])
}

fn unstack_rows(m: &Matrix) -> Vec<Vector> {
    m.row_iter().map(|r| r.transpose()).collect()
}

fn push_trajectory(art: &mut Artifact, traj: &Trajectory) {
    art.push("states", stack_rows(&traj.states));
    art.push("controls", stack_rows(&traj.controls));
}

fn read_trajectory(art: &Artifact) -> Result<Trajectory> {
    Trajectory::new(unstack_rows(art.block("states")?), unstack_rows(art.block("controls")?))
}

pub fn nominal_to_artifact(traj: &Trajectory) -> Artifact {
    let mut art = Artifact::new("nominal")
        .field("horizon", traj.horizon())
        .field("state_dim", traj.state_dim())
        .field("control_dim", traj.control_dim());
    push_trajectory(&mut art, traj);
    art
}

pub fn nominal_from_artifact(art: &Artifact) -> Result<Trajectory> {
    art.expect_kind("nominal")?;
    let traj = read_trajectory(art)?;
    check_dims(art, &traj)?;
    Ok(traj)
}

fn check_dims(art: &Artifact, traj: &Trajectory) -> Result<()> {
    for (key, actual) in [
        ("horizon", traj.horizon()),
        ("state_dim", traj.state_dim()),
        ("control_dim", traj.control_dim()),
    ] {
        let declared: usize = art.get_parsed(key)?;
        if declared != actual {
            return Err(Error::Dimension(format!("{key}: header says {declared}, data has {actual}")));
        }
    }
    Ok(())
}

fn list(values: &[usize]) -> String {
    if values.is_empty() {
        "-".into()
    } else {
        values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

fn parse_list(raw: &str) -> Result<Vec<usize>> {
    if raw == "-" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| s.parse().map_err(|_| Error::Config(format!("invalid index list '{raw}'"))))
        .collect()
}

fn push_rom(art: &mut Artifact, rom: &LtvRom) {
    art.set("order", rom.order);
    art.set("output_dim", rom.output_dim);
    art.set("input_dim", rom.input_dim);
    art.set("horizon", rom.horizon);
    art.set("k_lo", rom.k_lo);
    art.set("k_hi", rom.k_hi);
    art.set("deficient_steps", list(&rom.deficient_steps));
    art.push_all("a", &rom.a);
    art.push_all("b", &rom.b);
    art.push_all("c", &rom.c);
    for s in &rom.singular_values {
        art.push("singular_values", Matrix::from_row_slice(1, s.len(), s));
    }
}

fn read_rom(art: &Artifact) -> Result<LtvRom> {
    let rom = LtvRom {
        order: art.get_parsed("order")?,
        output_dim: art.get_parsed("output_dim")?,
        input_dim: art.get_parsed("input_dim")?,
        horizon: art.get_parsed("horizon")?,
        k_lo: art.get_parsed("k_lo")?,
        k_hi: art.get_parsed("k_hi")?,
        a: art.blocks("a").into_iter().cloned().collect(),
        b: art.blocks("b").into_iter().cloned().collect(),
        c: art.blocks("c").into_iter().cloned().collect(),
        singular_values: art
            .blocks("singular_values")
            .into_iter()
            .map(|m| m.iter().copied().collect())
            .collect(),
        deficient_steps: parse_list(art.get("deficient_steps")?)?,
    };
    let window = rom.k_hi.checked_sub(rom.k_lo).map(|w| w + 1);
    let shapes_ok = window == Some(rom.a.len())
        && rom.b.len() == rom.k_hi + 1
        && rom.c.len() == rom.a.len() + 1
        && rom.a.iter().all(|a| a.shape() == (rom.order, rom.order))
        && rom.b.iter().all(|b| b.shape() == (rom.order, rom.input_dim))
        && rom.c.iter().all(|c| c.shape() == (rom.output_dim, rom.order));
    if !shapes_ok {
        return Err(Error::Dimension(format!(
            "model blocks (a: {}, b: {}, c: {}) inconsistent with order {} and window [{}, {}]",
            rom.a.len(),
            rom.b.len(),
            rom.c.len(),
            rom.order,
            rom.k_lo,
            rom.k_hi
        )));
    }
    Ok(rom)
}

pub fn rom_to_artifact(rom: &LtvRom) -> Artifact {
    let mut art = Artifact::new("rom");
    push_rom(&mut art, rom);
    art
}

pub fn rom_from_artifact(art: &Artifact) -> Result<LtvRom> {
    art.expect_kind("rom")?;
    read_rom(art)
}

pub fn policy_to_artifact(policy: &FeedbackPolicy) -> Artifact {
    let mut art = Artifact::new("policy")
        .field("state_dim", policy.nominal.state_dim())
        .field("control_dim", policy.nominal.control_dim());
    push_rom(&mut art, &policy.rom);
    push_trajectory(&mut art, &policy.nominal);
    art.push_all("lqr_gain", &policy.lqr_gains);
    art.push_all("kalman_gain", &policy.kalman.gains);
    art.push_all("predicted_cov", &policy.kalman.predicted);
    art.push_all("filtered_cov", &policy.kalman.filtered);
    art
}

pub fn policy_from_artifact(art: &Artifact) -> Result<FeedbackPolicy> {
    art.expect_kind("policy")?;
    let nominal = read_trajectory(art)?;
    check_dims(art, &nominal)?;
    let rom = read_rom(art)?;
    let policy = FeedbackPolicy {
        rom,
        lqr_gains: art.blocks("lqr_gain").into_iter().cloned().collect(),
        kalman: KalmanSolution {
            gains: art.blocks("kalman_gain").into_iter().cloned().collect(),
            predicted: art.blocks("predicted_cov").into_iter().cloned().collect(),
            filtered: art.blocks("filtered_cov").into_iter().cloned().collect(),
        },
        nominal,
    };
    let n = policy.horizon();
    if policy.rom.horizon != n
        || policy.lqr_gains.len() != n
        || policy.kalman.gains.len() != n + 1
        || policy.kalman.predicted.len() != n + 1
        || policy.kalman.filtered.len() != n + 1
    {
        return Err(Error::Dimension(format!(
            "policy sequences do not match horizon {n}: model {}, lqr {}, kalman {}",
            policy.rom.horizon,
            policy.lqr_gains.len(),
            policy.kalman.gains.len()
        )));
    }
    Ok(policy)
}

pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("stage,iteration,cost,grad_norm,rollouts\n");
    for r in history {
        writeln!(out, "{},{},{:e},{:e},{}", r.stage, r.iteration, r.cost, r.grad_norm, r.rollouts).unwrap();
    }
    out
}

/// One row per step: the flattened gain `L_k` in row-major order.
pub fn gains_csv(gains: &[Matrix]) -> String {
    let (rows, cols) = gains.first().map_or((0, 0), |g| g.shape());
    let mut header = vec!["k".to_string()];
    for r in 0..rows {
        for c in 0..cols {
            header.push(format!("l_{r}_{c}"));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for (k, g) in gains.iter().enumerate() {
        let mut cells = vec![k.to_string()];
        for r in 0..rows {
            for c in 0..cols {
                cells.push(format!("{:e}", g[(r, c)]));
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Artifact {
        let mut art = Artifact::new("test").field("name", "demo run").field("n", 3);
        art.push("m", Matrix::from_row_slice(2, 3, &[0.1, -2.5e-300, 1.0 / 3.0, f64::MAX, 0.0, -0.0]));
        art.push("empty", Matrix::zeros(2, 0));
        art
    }

    #[test]
    fn text_round_trip_is_exact() {
        let art = sample();
        let text = art.to_text();
        let back = Artifact::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.blocks("m")[0], art.blocks("m")[0]);
        assert_eq!(back.get("name").unwrap(), "demo run");
        assert_eq!(back.get_parsed::<usize>("n").unwrap(), 3);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = sample().to_text();
        let corrupt = text.replacen("1e-1", "1e-1x", 1);
        match Artifact::parse(&corrupt) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Artifact::parse(&truncated), Err(Error::Parse { line: 7, .. })));
        assert!(matches!(Artifact::parse("d2c-artifact 9\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(Artifact::parse(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn nominal_round_trip() {
        let traj = Trajectory::new(
            vec![Vector::from_vec(vec![0.1, 0.2]), Vector::from_vec(vec![0.3, 0.4])],
            vec![Vector::from_vec(vec![-1.0])],
        )
        .unwrap();
        let art = nominal_to_artifact(&traj);
        let back = nominal_from_artifact(&Artifact::parse(&art.to_text()).unwrap()).unwrap();
        assert_eq!(back, traj);
        assert!(rom_from_artifact(&art).is_err());
    }

    #[test]
    fn declared_dims_are_checked() {
        let traj = Trajectory::new(vec![Vector::zeros(2); 3], vec![Vector::zeros(1); 2]).unwrap();
        let mut art = nominal_to_artifact(&traj);
        art.set("horizon", 5);
        assert!(matches!(nominal_from_artifact(&art), Err(Error::Dimension(_))));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let text = csv(&["a", "b"], [[1.0, 2.5], [3.0, -0.5]]);
        assert_eq!(text, "a,b\n1,2.5\n3,-0.5\n");
        let gains = gains_csv(&[Matrix::from_row_slice(1, 2, &[1.0, 2.0])]);
        assert_eq!(gains, "k,l_0_0,l_0_1\n0,1e0,2e0\n");
    }
}
