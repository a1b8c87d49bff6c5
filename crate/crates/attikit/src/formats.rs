//! On-disk artifact formats.
//!
//! - Dataset: versioned columnar text. Metadata lines (`# key = value`)
//!   carry the sample count, split parameters, and normalization statistics;
//!   a header row names all 26 columns in sample field order; each data row
//!   is one transition sample printed at full double precision (Rust's
//!   shortest round-trip formatting, so re-parsing is bit-exact).
//! - Model: binary, little-endian. Layout: 8-byte magic `ATKMLP01`; five
//!   u32 fields (input_dim, hidden_layers, hidden_units, horizon,
//!   activation tag — 0 is tanh); one u64 parameter count; then f64 arrays:
//!   input mean, input std, per-axis target σ, and per layer the row-major
//!   weights followed by biases.
//! - History, traces, reports, and manifests: columnar or `key = value`
//!   text, written atomically (temp file + rename).

use attikit_core::dataset::{
    split_indices, DatasetSplit, Normalization, TransitionSample, CONTEXT_DIM, INPUT_DIM,
    MODEL_INPUT_DIM, TARGET_DIM,
};
use attikit_core::mlp::{MlpConfig, MlpModel, ModelNormalization};
use attikit_core::training::EpochStats;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("version error: {0}")]
    Version(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

const DATASET_MAGIC: &str = "attikit-dataset v1";
const MODEL_MAGIC: &[u8; 8] = b"ATKMLP01";
const ACTIVATION_TANH: u32 = 0;

/// Writes `content` to `path` atomically (temp file in the same directory,
/// then rename), so readers never observe a partial file.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

pub const DATASET_COLUMNS: [&str; 26] = [
    "sim_id",
    "step_id",
    "omega_x",
    "omega_y",
    "omega_z",
    "omega_rw_x",
    "omega_rw_y",
    "omega_rw_z",
    "u_x",
    "u_y",
    "u_z",
    "omega_dot_x",
    "omega_dot_y",
    "omega_dot_z",
    "dw_x",
    "dw_y",
    "dw_z",
    "i_s_xx",
    "i_s_xy",
    "i_s_xz",
    "i_s_yy",
    "i_s_yz",
    "i_s_zz",
    "i_rw_x",
    "i_rw_y",
    "i_rw_z",
];

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn save_dataset(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut out = String::new();
    out.push_str(DATASET_MAGIC);
    out.push('\n');
    out.push_str(&format!("# n_samples = {}\n", split.samples.len()));
    out.push_str(&format!("# ratio = {}\n", split.ratio));
    out.push_str(&format!("# split_seed = {}\n", split.split_seed));
    out.push_str(&format!(
        "# input_mean = {}\n",
        join_f64(&split.normalization.input_mean)
    ));
    out.push_str(&format!(
        "# input_std = {}\n",
        join_f64(&split.normalization.input_std)
    ));
    out.push_str(&format!(
        "# target_std = {}\n",
        join_f64(&split.normalization.target_std)
    ));
    out.push_str(&DATASET_COLUMNS.join(" "));
    out.push('\n');
    for s in &split.samples {
        out.push_str(&format!("{} {}", s.sim_id, s.step_id));
        for v in s.x.iter().chain(s.y.iter()).chain(s.inertia_ctx.iter()) {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

struct OffsetReader<R> {
    inner: R,
    offset: usize,
}

impl<R: BufRead> OffsetReader<R> {
    fn next_line(&mut self) -> Result<Option<(usize, String)>> {
        let start = self.offset;
        let mut line = String::new();
        let read = self.inner.read_line(&mut line)?;
        if read == 0 {
            return Ok(None);
        }
        self.offset += read;
        while line.ends_with('\n') || line.ends_with('\r') {
            line.pop();
        }
        Ok(Some((start, line)))
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> FormatError {
    FormatError::Parse {
        offset,
        message: message.into(),
    }
}

fn meta_value<'l>(line: &'l str, key: &str, offset: usize) -> Result<&'l str> {
    let prefix = format!("# {key} = ");
    line.strip_prefix(&prefix)
        .ok_or_else(|| parse_err(offset, format!("expected metadata line `{prefix}…`")))
}

fn parse_f64_list(text: &str, expect: usize, offset: usize) -> Result<Vec<f64>> {
    let values: std::result::Result<Vec<f64>, _> =
        text.split_whitespace().map(|t| t.parse::<f64>()).collect();
    let values = values.map_err(|e| parse_err(offset, format!("bad float: {e}")))?;
    if values.len() != expect {
        return Err(parse_err(
            offset,
            format!("expected {expect} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    let file = fs::File::open(path)?;
    let mut reader = OffsetReader {
        inner: BufReader::new(file),
        offset: 0,
    };

    let (off, magic) = reader
        .next_line()?
        .ok_or_else(|| parse_err(0, "empty file"))?;
    if magic != DATASET_MAGIC {
        return Err(FormatError::Version(format!(
            "expected `{DATASET_MAGIC}`, found `{magic}` at byte {off}"
        )));
    }

    let (off, line) = reader.next_line()?.ok_or_else(|| parse_err(0, "truncated header"))?;
    let n_samples: usize = meta_value(&line, "n_samples", off)?
        .parse()
        .map_err(|e| parse_err(off, format!("bad n_samples: {e}")))?;
    let (off, line) = reader.next_line()?.ok_or_else(|| parse_err(0, "truncated header"))?;
    let ratio: f64 = meta_value(&line, "ratio", off)?
        .parse()
        .map_err(|e| parse_err(off, format!("bad ratio: {e}")))?;
    let (off, line) = reader.next_line()?.ok_or_else(|| parse_err(0, "truncated header"))?;
    let split_seed: u64 = meta_value(&line, "split_seed", off)?
        .parse()
        .map_err(|e| parse_err(off, format!("bad split_seed: {e}")))?;

    let (off, line) = reader.next_line()?.ok_or_else(|| parse_err(0, "truncated header"))?;
    let input_mean = parse_f64_list(meta_value(&line, "input_mean", off)?, MODEL_INPUT_DIM, off)?;
    let (off, line) = reader.next_line()?.ok_or_else(|| parse_err(0, "truncated header"))?;
    let input_std = parse_f64_list(meta_value(&line, "input_std", off)?, MODEL_INPUT_DIM, off)?;
    let (off, line) = reader.next_line()?.ok_or_else(|| parse_err(0, "truncated header"))?;
    let target_std = parse_f64_list(meta_value(&line, "target_std", off)?, TARGET_DIM, off)?;

    let (off, header) = reader.next_line()?.ok_or_else(|| parse_err(0, "missing column header"))?;
    let expected_header = DATASET_COLUMNS.join(" ");
    if header != expected_header {
        return Err(parse_err(off, "column header does not match the v1 layout"));
    }

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (off, line) = reader
            .next_line()?
            .ok_or_else(|| parse_err(reader.offset, "file truncated before declared sample count"))?;
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != DATASET_COLUMNS.len() {
            return Err(parse_err(
                off,
                format!("expected {} columns, found {}", DATASET_COLUMNS.len(), values.len()),
            ));
        }
        let sim_id: u32 = values[0]
            .parse()
            .map_err(|e| parse_err(off, format!("bad sim_id: {e}")))?;
        let step_id: u32 = values[1]
            .parse()
            .map_err(|e| parse_err(off, format!("bad step_id: {e}")))?;
        let mut floats = [0.0f64; INPUT_DIM + TARGET_DIM + CONTEXT_DIM];
        for (i, v) in values[2..].iter().enumerate() {
            floats[i] = v
                .parse()
                .map_err(|e| parse_err(off, format!("bad float in column {}: {e}", i + 2)))?;
        }
        let mut x = [0.0; INPUT_DIM];
        let mut y = [0.0; TARGET_DIM];
        let mut ctx = [0.0; CONTEXT_DIM];
        x.copy_from_slice(&floats[..INPUT_DIM]);
        y.copy_from_slice(&floats[INPUT_DIM..INPUT_DIM + TARGET_DIM]);
        ctx.copy_from_slice(&floats[INPUT_DIM + TARGET_DIM..]);
        samples.push(TransitionSample {
            sim_id,
            step_id,
            x,
            y,
            inertia_ctx: ctx,
        });
    }

    // membership is re-derived from the stored split parameters
    let (train, val) = split_indices(samples.len(), ratio, split_seed);
    let mut norm = Normalization {
        input_mean: [0.0; MODEL_INPUT_DIM],
        input_std: [0.0; MODEL_INPUT_DIM],
        target_std: [0.0; TARGET_DIM],
    };
    norm.input_mean.copy_from_slice(&input_mean);
    norm.input_std.copy_from_slice(&input_std);
    norm.target_std.copy_from_slice(&target_std);

    Ok(DatasetSplit {
        samples,
        train,
        val,
        normalization: norm,
        ratio,
        split_seed,
    })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    for v in [
        model.config.input_dim as u32,
        model.config.hidden_layers as u32,
        model.config.hidden_units as u32,
        model.config.horizon as u32,
        ACTIVATION_TANH,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(model.parameter_count() as u64).to_le_bytes());
    let mut write_f64s = |values: &[f64], buf: &mut Vec<u8>| {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    write_f64s(&model.normalization.input_mean, &mut buf);
    write_f64s(&model.normalization.input_std, &mut buf);
    write_f64s(&model.normalization.target_std, &mut buf);
    for l in 0..model.weights.len() {
        write_f64s(&model.weights[l], &mut buf);
        write_f64s(&model.biases[l], &mut buf);
    }
    write_atomic(path, &buf)
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let mut file = fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > buf.len() {
            return Err(FormatError::Version(format!(
                "model file truncated at byte {cursor}"
            )));
        }
        let slice = &buf[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };

    let magic = take(&mut cursor, 8)?;
    if magic != MODEL_MAGIC {
        return Err(FormatError::Version("bad model magic".into()));
    }
    let mut read_u32 = |cursor: &mut usize| -> Result<u32> {
        let b = take(cursor, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let input_dim = read_u32(&mut cursor)? as usize;
    let hidden_layers = read_u32(&mut cursor)? as usize;
    let hidden_units = read_u32(&mut cursor)? as usize;
    let horizon = read_u32(&mut cursor)? as usize;
    let activation = read_u32(&mut cursor)?;
    if activation != ACTIVATION_TANH {
        return Err(FormatError::Version(format!(
            "unknown activation tag {activation}"
        )));
    }
    let declared_params = {
        let b = take(&mut cursor, 8)?;
        u64::from_le_bytes(b.try_into().unwrap()) as usize
    };

    let config = MlpConfig {
        input_dim,
        hidden_layers,
        hidden_units,
        horizon,
    };
    config
        .validate()
        .map_err(|e| FormatError::Version(format!("bad model dimensions: {e}")))?;

    let mut read_f64s = |cursor: &mut usize, n: usize| -> Result<Vec<f64>> {
        let b = take(cursor, 8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let input_mean = read_f64s(&mut cursor, input_dim)?;
    let input_std = read_f64s(&mut cursor, input_dim)?;
    let target_std_v = read_f64s(&mut cursor, TARGET_DIM)?;
    let normalization = ModelNormalization {
        input_mean,
        input_std,
        target_std: [target_std_v[0], target_std_v[1], target_std_v[2]],
    };

    let dims = config.layer_dims();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut total = 0usize;
    for l in 0..dims.len() - 1 {
        let w = read_f64s(&mut cursor, dims[l] * dims[l + 1])?;
        let b = read_f64s(&mut cursor, dims[l + 1])?;
        total += w.len() + b.len();
        weights.push(w);
        biases.push(b);
    }
    if total != declared_params {
        return Err(FormatError::Version(format!(
            "parameter count mismatch: header says {declared_params}, layout implies {total}"
        )));
    }
    if cursor != buf.len() {
        return Err(FormatError::Version(format!(
            "{} trailing bytes after parameters",
            buf.len() - cursor
        )));
    }

    let model = MlpModel {
        config,
        weights,
        biases,
        normalization,
    };
    model
        .validate()
        .map_err(|e| FormatError::Version(format!("invalid model payload: {e}")))?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// History, traces, reports, manifests
// ---------------------------------------------------------------------------

pub const HISTORY_HEADER: &str = "epoch lr beta train_dd train_pi val_dd val_pi";

pub fn history_line(s: &EpochStats) -> String {
    format!(
        "{} {} {} {} {} {} {}",
        s.epoch, s.lr, s.beta, s.train_dd, s.train_pi, s.val_dd, s.val_pi
    )
}

/// Incremental columnar writer with an immediate flush per row, so an
/// interrupted run still leaves a readable prefix.
pub struct ColumnarWriter {
    inner: BufWriter<fs::File>,
}

impl ColumnarWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = fs::File::create(path)?;
        let mut inner = BufWriter::new(file);
        writeln!(inner, "{header}")?;
        inner.flush()?;
        Ok(ColumnarWriter { inner })
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.inner, "{line}")?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Appends one `key = value` block to the out directory's manifest. The
/// manifest is append-only: one block per command invocation.
pub fn append_manifest(out_dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("manifest.txt");
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for (k, v) in entries {
        writeln!(file, "{k} = {v}")?;
    }
    writeln!(file)?;
    Ok(())
}
