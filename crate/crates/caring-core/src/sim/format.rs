//! Dataset file format.
//!
//! Little-endian layout: magic `CRNG`, u32 version = 1, then u32 counts
//! N, T, n_latent, d_obs, mu, tau, r, followed by the z payload
//! (f64[N·T·n_latent], row-major) and the x payload (f64[N·T·d_obs]).
//! A JSON sidecar `<file>.meta.json` carries the full spec including seeds;
//! round-trips are bit-exact.

use super::{GenerativeSpec, MuFilterReport, SplitTag, TrajectoryBatch};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"CRNG";
const VERSION: u32 = 1;
/// Bytes before the z payload: magic + version + 7 u32 counts.
pub const HEADER_LEN: usize = 4 + 4 + 4 * 7;

pub const SIDECAR_SUFFIX: &str = ".meta.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: GenerativeSpec,
    pub n_traj: usize,
    pub t_len: usize,
    pub split: SplitTag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_filter: Option<MuFilterReport>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(SIDECAR_SUFFIX);
    PathBuf::from(s)
}

/// Write the batch and its sidecar. `mu_filter` is recorded when available.
pub fn serialize_batch(
    batch: &TrajectoryBatch,
    path: &Path,
    mu_filter: Option<&MuFilterReport>,
) -> Result<()> {
    let spec = &batch.spec;
    let mut buf = Vec::with_capacity(
        HEADER_LEN + 8 * (batch.z.len() + batch.x.len()),
    );
    buf.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        batch.n_traj as u32,
        batch.t_len as u32,
        spec.n_latent as u32,
        spec.d_obs as u32,
        spec.mu as u32,
        spec.tau as u32,
        spec.r as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &batch.z {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &batch.x {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;

    let sidecar = Sidecar {
        spec: spec.clone(),
        n_traj: batch.n_traj,
        t_len: batch.t_len,
        split: batch.split,
        mu_filter: mu_filter.cloned(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

fn format_err(offset: usize, message: impl Into<String>) -> CoreError {
    CoreError::Format { offset: offset as u64, message: message.into() }
}

/// Read a batch and its sidecar back.
pub fn deserialize_batch(path: &Path) -> Result<(TrajectoryBatch, Option<MuFilterReport>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), format!("truncated header: need {HEADER_LEN} bytes")));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected CRNG"));
    }
    let u32_at = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
    };
    let version = u32_at(0);
    if version != VERSION as usize {
        return Err(format_err(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let (n_traj, t_len, n_latent, d_obs, mu, tau, r) =
        (u32_at(1), u32_at(2), u32_at(3), u32_at(4), u32_at(5), u32_at(6), u32_at(7));
    let z_len = n_traj * t_len * n_latent;
    let x_len = n_traj * t_len * d_obs;
    let expected = HEADER_LEN + 8 * (z_len + x_len);
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("payload length mismatch: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let read_f64s = |start: usize, count: usize| -> Vec<f64> {
        bytes[start..start + 8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let z = read_f64s(HEADER_LEN, z_len);
    let x = read_f64s(HEADER_LEN + 8 * z_len, x_len);

    let sc_path = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&sc_path).map_err(|e| {
        CoreError::Usage(format!("missing sidecar {}: {e}", sc_path.display()))
    })?)?;
    let spec = sidecar.spec;
    if spec.n_latent != n_latent
        || spec.d_obs != d_obs
        || spec.mu != mu
        || spec.tau != tau
        || spec.r != r
        || sidecar.n_traj != n_traj
        || sidecar.t_len != t_len
    {
        return Err(CoreError::Config(format!(
            "sidecar disagrees with header: header (N={n_traj},T={t_len},n={n_latent},d={d_obs},mu={mu},tau={tau},r={r})"
        )));
    }
    Ok((
        TrajectoryBatch { z, x, n_traj, t_len, spec, split: sidecar.split },
        sidecar.mu_filter,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::Exec;
    use crate::sim::generate;

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = GenerativeSpec::ng_default(770);
        let batch = generate(&spec, 16, 10, Exec::Auto).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.crng");
        serialize_batch(&batch, &path, None).unwrap();
        let (back, filter) = deserialize_batch(&path).unwrap();
        assert_eq!(batch, back);
        assert!(filter.is_none());
    }

    #[test]
    fn header_is_36_bytes_before_payload() {
        // magic + version + 7 counts = 4 + 4 + 4·7.
        assert_eq!(HEADER_LEN, 36);
        let spec = GenerativeSpec::ng_default(1);
        let batch = generate(&spec, 2, 3, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.crng");
        serialize_batch(&batch, &path, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 36 + 8 * (2 * 3 * 3 + 2 * 3 * 2));
        // First payload f64 equals z[0].
        let first = f64::from_le_bytes(bytes[36..44].try_into().unwrap());
        assert_eq!(first, batch.z[0]);
    }

    #[test]
    fn truncated_file_names_expected_and_actual_lengths() {
        let spec = GenerativeSpec::ng_default(2);
        let batch = generate(&spec, 4, 5, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.crng");
        serialize_batch(&batch, &path, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        let err = deserialize_batch(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("found"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.crng");
        std::fs::write(&path, b"NOPE------------------------------------").unwrap();
        let err = deserialize_batch(&path).unwrap_err();
        assert!(matches!(err, CoreError::Format { offset: 0, .. }), "{err}");
    }
}
