use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, SystemState};
use crate::error::{Error, Result};
use crate::so3::{UnitQuat, Vec3};

/// Column order of the flight-log CSV.
pub const COLUMNS: [&str; 18] = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "plx", "ply", "plz", "thrust",
    "wx", "wy", "wz",
];

/// Optional trailing columns carrying the true load angular velocity
/// (written by the synthetic generator).
pub const OMEGA_LOAD_COLUMNS: [&str; 3] = ["olx", "oly", "olz"];

pub const FORMAT_VERSION: u32 = 1;

/// Maximum step-to-step deviation of `t` from the sampling period.
pub const TIME_TOLERANCE: f64 = 1e-6;
/// Quaternion norms further than this from 1 are rejected.
pub const QUAT_REJECT: f64 = 1e-3;
const QUAT_RENORMALIZE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: SystemState,
    pub control: ControlInput,
    pub omega_load: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlightLog {
    pub id: String,
    /// Sampling period (s).
    pub dt: f64,
    pub rows: Vec<LogRow>,
}

impl FlightLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &SystemState> {
        self.rows.iter().map(|r| &r.state)
    }

    /// Flip quaternion signs so that the first has `w >= 0` and consecutive
    /// quaternions have a nonnegative dot product.
    pub fn enforce_sign_continuity(&mut self) {
        let mut prev: Option<UnitQuat> = None;
        for row in &mut self.rows {
            let q = row.state.q;
            let flip = match prev {
                None => q.w < 0.0,
                Some(p) => p.dot(&q) < 0.0,
            };
            if flip {
                row.state.q = q.neg();
            }
            prev = Some(row.state.q);
        }
    }
}

/// Renames applied to header fields before matching them against
/// [`COLUMNS`]; keys are names found in the file, values canonical names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap(pub BTreeMap<String, String>);

impl ColumnMap {
    fn canonical<'a>(&'a self, name: &'a str) -> &'a str {
        self.0.get(name).map_or(name, String::as_str)
    }
}

pub fn load_log(path: &Path) -> Result<FlightLog> {
    load_log_with(path, &ColumnMap::default())
}

/// Parse and validate a flight-log CSV.
///
/// Lines starting with `#` carry `key=value` metadata (`id`, `dt`). When
/// `dt` is absent the period is taken from the first two rows. If `id` is
/// absent the file stem is used.
pub fn load_log_with(path: &Path, columns: &ColumnMap) -> Result<FlightLog> {
    let text = std::fs::read_to_string(path)?;
    parse_log(&text, path, columns)
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub(crate) fn parse_log(text: &str, path: &Path, columns: &ColumnMap) -> Result<FlightLog> {
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.trim_start().strip_prefix('#') {
            for token in rest.split_whitespace() {
                if let Some((k, v)) = token.split_once('=') {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
    }
    let id = meta.get("id").cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let declared_dt = match meta.get("dt") {
        Some(v) => Some(
            v.parse::<f64>()
                .ok()
                .filter(|d| *d > 0.0)
                .ok_or_else(|| malformed(path, 1, format!("bad dt metadata {v:?}")))?,
        ),
        None => None,
    };

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let header_line = header.position().map_or(1, |p| p.line() as usize);
    let index_of = |name: &str| header.iter().position(|h| columns.canonical(h) == name);
    let mut idx = [0usize; 18];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = index_of(name)
            .ok_or_else(|| malformed(path, header_line, format!("missing column {name}")))?;
    }
    let omega_idx: Option<Vec<usize>> = OMEGA_LOAD_COLUMNS.iter().map(|n| index_of(n)).collect();

    let mut rows: Vec<LogRow> = Vec::new();
    let mut dt = declared_dt;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            malformed(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<f64> {
            let s = record
                .get(i)
                .ok_or_else(|| malformed(path, line, format!("missing field {}", i + 1)))?;
            let v: f64 = s
                .parse()
                .map_err(|_| malformed(path, line, format!("cannot parse {s:?} as a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(malformed(path, line, format!("non-finite value {s}")))
            }
        };
        let v: Vec<f64> = idx.iter().map(|&i| field(i)).collect::<Result<_>>()?;
        let t = v[0];

        if let Some(prev) = rows.last() {
            let step = t - prev.t;
            let expected = *dt.get_or_insert(step);
            if !(step > 0.0 && (step - expected).abs() <= TIME_TOLERANCE) {
                return Err(Error::NonUniformTimestamps {
                    path: path.to_path_buf(),
                    line,
                    found: step,
                    expected,
                });
            }
        }

        let mut q = UnitQuat::new(v[7], v[8], v[9], v[10]);
        let norm = q.norm();
        if (norm - 1.0).abs() > QUAT_REJECT {
            return Err(Error::QuaternionNorm {
                path: path.to_path_buf(),
                line,
                norm,
            });
        }
        if (norm - 1.0).abs() > QUAT_RENORMALIZE {
            log::warn!("{}:{line}: renormalizing quaternion with norm {norm:.6}", path.display());
            q = q.normalized();
        }

        let thrust = v[14];
        if thrust < 0.0 {
            return Err(malformed(path, line, format!("negative thrust {thrust}")));
        }
        let omega_load = match &omega_idx {
            Some(ix) => Some(Vec3::new(field(ix[0])?, field(ix[1])?, field(ix[2])?)),
            None => None,
        };
        rows.push(LogRow {
            t,
            state: SystemState {
                p: Vec3::new(v[1], v[2], v[3]),
                v: Vec3::new(v[4], v[5], v[6]),
                q,
                p_load: Vec3::new(v[11], v[12], v[13]),
            },
            control: ControlInput::new(thrust, Vec3::new(v[15], v[16], v[17])),
            omega_load,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let dt = dt.unwrap_or(crate::dynamics::PhysicalParams::default().dt);
    let mut log = FlightLog { id, dt, rows };
    log.enforce_sign_continuity();
    Ok(log)
}

/// Write `log` in the format read by [`load_log`]. Values are printed with
/// round-trip precision.
pub fn save_log(log: &FlightLog, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_log(log, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_log(log: &FlightLog, out: &mut impl Write) -> Result<()> {
    writeln!(out, "# slungload flight log v{FORMAT_VERSION}")?;
    writeln!(out, "# id={} dt={:?}", log.id, log.dt)?;
    let with_omega = !log.rows.is_empty() && log.rows.iter().all(|r| r.omega_load.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = COLUMNS.to_vec();
    if with_omega {
        header.extend(OMEGA_LOAD_COLUMNS);
    }
    w.write_record(&header)?;
    for r in &log.rows {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        rec.push(format!("{:?}", r.t));
        rec.extend(r.state.to_vector().iter().map(|v| format!("{v:?}")));
        rec.extend(r.control.to_vector().iter().map(|v| format!("{v:?}")));
        if with_omega {
            let o = r.omega_load.expect("checked above");
            rec.extend(o.to_array().iter().map(|v| format!("{v:?}")));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Resample a log onto a uniform grid of period `dt` starting at its first
/// timestamp. States and controls are interpolated linearly (quaternions by
/// normalized linear interpolation). Rows need increasing, not uniform,
/// timestamps.
pub fn resample(id: &str, rows: &[LogRow], dt: f64) -> Result<FlightLog> {
    if rows.len() < 2 || dt <= 0.0 {
        return Err(Error::Data(format!(
            "resample {id}: need at least two rows and dt > 0"
        )));
    }
    if rows.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::Data(format!("resample {id}: timestamps not increasing")));
    }
    let t0 = rows[0].t;
    let span = rows.last().expect("two rows").t - t0;
    let count = (span / dt + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    for i in 0..count {
        let t = t0 + i as f64 * dt;
        while j + 2 < rows.len() && rows[j + 1].t < t {
            j += 1;
        }
        let (a, b) = (&rows[j], &rows[j + 1]);
        let s = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let lerp = |x: f64, y: f64| x + s * (y - x);
        let xa = a.state.to_vector();
        let mut xb = b.state.to_vector();
        if a.state.q.dot(&b.state.q) < 0.0 {
            for v in &mut xb[6..10] {
                *v = -*v;
            }
        }
        let x: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| lerp(*x, *y)).collect();
        let mut state = SystemState::from_slice(&x);
        state.q = state.q.normalized();
        let ua = a.control.to_vector();
        let ub = b.control.to_vector();
        let u: Vec<f64> = ua.iter().zip(&ub).map(|(x, y)| lerp(*x, *y)).collect();
        let omega_load = match (a.omega_load, b.omega_load) {
            (Some(oa), Some(ob)) => Some(oa + (ob - oa).scale(s)),
            _ => None,
        };
        out.push(LogRow {
            t,
            state,
            control: ControlInput::from_slice(&u),
            omega_load,
        });
    }
    let mut log = FlightLog {
        id: id.to_string(),
        dt,
        rows: out,
    };
    log.enforce_sign_continuity();
    Ok(log)
}

/// Path of a log file named after its id inside `dir`.
pub fn log_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.csv"))
}
