//! Binary model and ensemble files, and the metric CSV layout.
//!
//! Model files: `DAISIDRF`, a version byte, the layer-width count (u32) and
//! widths (u64), the normalisation stats (mean length u64, means, sigma), the
//! parameter count (u64) and the parameters. Ensemble files: `DAISIENS`, a
//! version byte, `J` and `d` (u64) and the `J x d` payload. All integers and
//! floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::drift::{Mlp, NetDrift};
use crate::error::{DaisiError, Result};
use crate::filters::Ensemble;
use crate::interpolant::NormStats;
use crate::metrics::MetricReport;

pub const MODEL_MAGIC: &[u8; 8] = b"DAISIDRF";
pub const ENSEMBLE_MAGIC: &[u8; 8] = b"DAISIENS";
pub const FORMAT_VERSION: u8 = 1;

/// Upper bound on any length field, to reject corrupt headers before allocating.
const MAX_LEN: u64 = 1 << 32;

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let n = get_u64(r)?;
    if n > MAX_LEN {
        return Err(DaisiError::Format(format!("{what} length {n} is implausible")));
    }
    Ok(n as usize)
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(DaisiError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut v = [0u8; 1];
    r.read_exact(&mut v)?;
    if v[0] != FORMAT_VERSION {
        return Err(DaisiError::Format(format!("unsupported format version {}", v[0])));
    }
    Ok(())
}

pub fn write_model<W: Write>(w: &mut W, model: &NetDrift) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    let dims = model.mlp.dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        put_u64(w, d as u64)?;
    }
    put_u64(w, model.stats.mu.len() as u64)?;
    put_f64s(w, &model.stats.mu)?;
    put_f64s(w, &[model.stats.sigma])?;
    put_u64(w, model.mlp.params().len() as u64)?;
    put_f64s(w, model.mlp.params())?;
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<NetDrift> {
    check_header(r, MODEL_MAGIC)?;
    let mut nd = [0u8; 4];
    r.read_exact(&mut nd)?;
    let n_dims = u32::from_le_bytes(nd) as usize;
    if n_dims > 64 {
        return Err(DaisiError::Format(format!("{n_dims} layers is implausible")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(get_len(r, "layer width")?);
    }
    let mu_len = get_len(r, "mean")?;
    let mu = get_f64s(r, mu_len)?;
    let sigma = get_f64s(r, 1)?[0];
    let n_params = get_len(r, "parameter")?;
    if n_params != Mlp::param_count(&dims) {
        return Err(DaisiError::Format(format!(
            "parameter count {n_params} does not match layer widths {dims:?}"
        )));
    }
    let params = get_f64s(r, n_params)?;
    let stats = NormStats::new(mu, sigma).map_err(|e| DaisiError::Format(e.to_string()))?;
    NetDrift::new(Mlp::from_params(dims, params)?, stats)
}

pub fn save_model(path: &Path, model: &NetDrift) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetDrift> {
    let bytes = std::fs::read(path)?;
    read_model(&mut bytes.as_slice())
}

pub fn write_ensemble<W: Write>(w: &mut W, ens: &Ensemble) -> Result<()> {
    w.write_all(ENSEMBLE_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    put_u64(w, ens.len() as u64)?;
    put_u64(w, ens.dim as u64)?;
    put_f64s(w, &ens.members)
}

pub fn read_ensemble<R: Read>(r: &mut R) -> Result<Ensemble> {
    check_header(r, ENSEMBLE_MAGIC)?;
    let j = get_len(r, "member")?;
    let d = get_len(r, "dimension")?;
    let members = get_f64s(
        r,
        j.checked_mul(d)
            .ok_or_else(|| DaisiError::Format("size overflow".into()))?,
    )?;
    Ensemble::new(members, d)
}

pub const METRICS_HEADER: &str = "step,rmse,ens_rmse,crps,spread,ssr";

/// Metric rows as CSV text; `ssr` is empty where undefined and the `mmd`
/// column appears only if some row carries it.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let with_mmd = reports.iter().any(|r| r.mmd.is_some());
    let mut s = String::from(METRICS_HEADER);
    if with_mmd {
        s.push_str(",mmd");
    }
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{}",
            r.step,
            r.rmse,
            r.ens_rmse,
            r.crps,
            r.spread,
            opt(r.ssr)
        ));
        if with_mmd {
            s.push(',');
            s.push_str(&opt(r.mmd));
        }
        s.push('\n');
    }
    s
}

/// `step,x0,x1,...` rows for a trajectory.
pub fn trajectory_csv(states: &[Vec<f64>]) -> String {
    let d = states.first().map_or(0, Vec::len);
    let mut s = String::from("step");
    for i in 0..d {
        s.push_str(&format!(",x{i}"));
    }
    s.push('\n');
    for (n, x) in states.iter().enumerate() {
        s.push_str(&n.to_string());
        for v in x {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}
