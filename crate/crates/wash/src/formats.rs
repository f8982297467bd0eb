//! On-disk formats. Every float in a CSV is written with 17 significant
//! digits (`{:.16e}`) so files round-trip exactly and reruns are
//! byte-identical.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use wash_core::coordination::{CommLedger, ShufflePlan};
use wash_core::evaluation::MetricsRecord;
use wash_core::nn::{Dataset, Split};
use wash_core::population::Checkpoint;
use wash_core::toy2d::Trajectory;

use crate::error::{CliError, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<fs::File>) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes `text` to `path`, wrapping IO errors with the path.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------------------
// Dataset files
//
//   K dim n_train n_val n_test
//   x_1 ... x_dim label        (n_train lines, then n_val, then n_test)
//
// Whitespace separated; floats in shortest round-trip form.

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| CliError::io(path, e);
    writeln!(
        w,
        "{} {} {} {} {}",
        data.classes,
        data.dim,
        data.train.len(),
        data.val.len(),
        data.test.len()
    )
    .map_err(io)?;
    for split in [&data.train, &data.val, &data.test] {
        for i in 0..split.len() {
            for x in split.input(i, data.dim) {
                write!(w, "{x:e} ").map_err(io)?;
            }
            writeln!(w, "{}", split.labels[i]).map_err(io)?;
        }
    }
    finish(path, w)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = read_text(path)?;
    let bad = |msg: String| CliError::format(path, msg);
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad("empty dataset file".into()))?;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| bad(format!("bad header field `{t}`")))
        })
        .collect::<Result<_>>()?;
    let [classes, dim, n_train, n_val, n_test] = h[..] else {
        return Err(bad("header must be `K dim n_train n_val n_test`".into()));
    };
    let mut read_split = |n: usize| -> Result<Split> {
        let mut s = Split::default();
        for _ in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| bad("fewer records than the header declares".into()))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != dim + 1 {
                return Err(bad(format!("line {}: expected {} fields", ln + 1, dim + 1)));
            }
            for t in &fields[..dim] {
                s.inputs.push(
                    t.parse()
                        .map_err(|_| bad(format!("line {}: bad float `{t}`", ln + 1)))?,
                );
            }
            let y = fields[dim];
            s.labels.push(
                y.parse()
                    .map_err(|_| bad(format!("line {}: bad label `{y}`", ln + 1)))?,
            );
        }
        Ok(s)
    };
    let train = read_split(n_train)?;
    let val = read_split(n_val)?;
    let test = read_split(n_test)?;
    if lines.next().is_some() {
        return Err(bad("more records than the header declares".into()));
    }
    let data = Dataset {
        dim,
        classes,
        train,
        val,
        test,
    };
    data.validate()?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// Shuffle plans: one line per selected coordinate,
//
//   step layer coord perm_0 ... perm_{N-1}
//
// where model n receives the value model perm_n held. Steps without
// selected coordinates produce no lines.

pub const PLAN_HEADER: &str = "# step layer coord perm...";

pub fn write_plan(w: &mut impl Write, plan: &ShufflePlan) -> std::io::Result<()> {
    for e in plan.entries() {
        write!(w, "{} {} {}", plan.step(), e.layer, e.coord)?;
        for p in e.perm {
            write!(w, " {p}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Step and `(layer, coord, perm)` entries of the plan being read.
type PendingPlan = (usize, Vec<(usize, usize, Vec<u32>)>);

pub fn read_plans(path: &Path, n_models: usize) -> Result<Vec<ShufflePlan>> {
    let text = read_text(path)?;
    let bad = |ln: usize, msg: &str| CliError::format(path, format!("line {}: {msg}", ln + 1));
    let mut plans = Vec::new();
    let mut current: Option<PendingPlan> = None;
    for (ln, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let nums: Vec<u64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(ln, "non-integer field")))
            .collect::<Result<_>>()?;
        if nums.len() != 3 + n_models {
            return Err(bad(ln, "wrong field count"));
        }
        let step = nums[0] as usize;
        let entry = (
            nums[1] as usize,
            nums[2] as usize,
            nums[3..].iter().map(|&p| p as u32).collect(),
        );
        match &mut current {
            Some((s, entries)) if *s == step => entries.push(entry),
            _ => {
                if let Some((s, entries)) = current.take() {
                    plans.push(ShufflePlan::from_entries(s, n_models, entries)?);
                }
                current = Some((step, vec![entry]));
            }
        }
    }
    if let Some((s, entries)) = current {
        plans.push(ShufflePlan::from_entries(s, n_models, entries)?);
    }
    Ok(plans)
}

// ---------------------------------------------------------------------------
// metrics.csv

pub const METRICS_HEADER: &str =
    "step,lr,mean_loss,avg_consensus_dist,sum_sq_dist,comm_scalars_cum,comm_scalars_effective_cum";

pub fn metrics_csv(rows: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            fmt_f64(r.lr),
            fmt_f64(r.mean_loss),
            fmt_f64(r.avg_consensus_dist),
            fmt_f64(r.sum_sq_dist),
            r.comm_scalars_cum,
            r.comm_scalars_effective_cum
        );
    }
    out
}

pub fn parse_metrics_csv(path: &Path, text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CliError::format(path, "missing metrics header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || CliError::format(path, format!("row {}: malformed", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad());
            Ok(MetricsRecord {
                step: int(f[0])? as usize,
                lr: float(f[1])?,
                mean_loss: float(f[2])?,
                avg_consensus_dist: float(f[3])?,
                sum_sq_dist: float(f[4])?,
                comm_scalars_cum: int(f[5])?,
                comm_scalars_effective_cum: int(f[6])?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Trajectories and interpolation grids

/// `step,point_id,x,y` with one row per point per step; step 0 is the start.
pub fn trajectory_csv(t: &Trajectory) -> String {
    let mut out = String::from("step,point_id,x,y\n");
    for (step, pts) in t.path.iter().enumerate() {
        for (id, (x, y)) in pts.iter().enumerate() {
            out += &format!("{step},{id},{},{}\n", fmt_f64(*x), fmt_f64(*y));
        }
    }
    out
}

/// Square accuracy matrix: header `model,0,1,...`, then one row per model `a`
/// with the accuracy of `(1−λ)θ_a + λθ_b` in column `b`.
pub fn grid_csv(grid: &[Vec<f64>]) -> String {
    let mut out = String::from("model");
    for b in 0..grid.len() {
        out += &format!(",{b}");
    }
    out.push('\n');
    for (a, row) in grid.iter().enumerate() {
        out += &a.to_string();
        for v in row {
            out += &format!(",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints. Little-endian throughout:
//
//   magic    8 bytes  "WASHCKPT"
//   version  u32      1
//   config   u64      RunConfig fingerprint
//   step     u64      completed steps
//   n, d     u64 u64
//   params   n·d f64  model-major
//   momentum n·d f64  model-major
//   ledger   u64 ×5   n_models, d, scalars_nominal, scalars_effective, events
//   rows     u64      number of metrics rows, then per row:
//            u64 step, f64 lr, f64 mean_loss, f64 avg_dist, f64 sum_sq,
//            u64 comm_cum, u64 comm_effective_cum

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WASHCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let n = c.params.len();
    let d = c.params.first().map_or(0, Vec::len);
    let mut b = Vec::with_capacity(64 + 16 * n * d + 56 * c.metrics.len());
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let u = |b: &mut Vec<u8>, v: u64| b.extend_from_slice(&v.to_le_bytes());
    let f = |b: &mut Vec<u8>, v: f64| b.extend_from_slice(&v.to_le_bytes());
    u(&mut b, c.config_hash);
    u(&mut b, c.step as u64);
    u(&mut b, n as u64);
    u(&mut b, d as u64);
    for v in c.params.iter().chain(&c.momentum).flatten() {
        f(&mut b, *v);
    }
    let l = &c.ledger;
    for v in [
        l.n_models as u64,
        l.d as u64,
        l.scalars_nominal,
        l.scalars_effective,
        l.events,
    ] {
        u(&mut b, v);
    }
    u(&mut b, c.metrics.len() as u64);
    for r in &c.metrics {
        u(&mut b, r.step as u64);
        for v in [r.lr, r.mean_loss, r.avg_consensus_dist, r.sum_sq_dist] {
            f(&mut b, v);
        }
        u(&mut b, r.comm_scalars_cum);
        u(&mut b, r.comm_scalars_effective_cum);
    }
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take<const K: usize>(&mut self) -> Option<[u8; K]> {
        let (head, rest) = self.bytes.split_at_checked(K)?;
        self.bytes = rest;
        head.try_into().ok()
    }

    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take().map(f64::from_le_bytes)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Option<Checkpoint> {
    let mut c = Cursor { bytes };
    if &c.take::<8>()? != CHECKPOINT_MAGIC || u32::from_le_bytes(c.take()?) != CHECKPOINT_VERSION {
        return None;
    }
    let config_hash = c.u64()?;
    let step = c.u64()? as usize;
    let n = c.u64()? as usize;
    let d = c.u64()? as usize;
    if n.checked_mul(d)?.checked_mul(16)? > c.bytes.len() {
        return None;
    }
    let mut vectors = || {
        (0..n)
            .map(|_| (0..d).map(|_| c.f64()).collect::<Option<Vec<_>>>())
            .collect::<Option<Vec<_>>>()
    };
    let params = vectors()?;
    let momentum = vectors()?;
    let ledger = CommLedger {
        n_models: c.u64()? as usize,
        d: c.u64()? as usize,
        scalars_nominal: c.u64()?,
        scalars_effective: c.u64()?,
        events: c.u64()?,
    };
    let rows = c.u64()? as usize;
    if rows.checked_mul(56)? > c.bytes.len() {
        return None;
    }
    let mut metrics = Vec::with_capacity(rows);
    for _ in 0..rows {
        metrics.push(MetricsRecord {
            step: c.u64()? as usize,
            lr: c.f64()?,
            mean_loss: c.f64()?,
            avg_consensus_dist: c.f64()?,
            sum_sq_dist: c.f64()?,
            comm_scalars_cum: c.u64()?,
            comm_scalars_effective_cum: c.u64()?,
        });
    }
    if !c.bytes.is_empty() {
        return None;
    }
    Some(Checkpoint {
        config_hash,
        step,
        params,
        momentum,
        ledger,
        metrics,
    })
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    // write then rename so an interrupted write never leaves a torn file
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, encode_checkpoint(c)).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes).ok_or_else(|| CliError::format(path, "not a valid checkpoint"))
}
