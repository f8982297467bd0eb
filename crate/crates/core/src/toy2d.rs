//! Two points descending a 2D landscape with two shallow local wells and one
//! broad global well, trained independently, with an EMA pull, or with
//! per-coordinate shuffling between the two points.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{stream, Purpose};

/// One radial well `−amplitude · exp(−sharpness · sqrt(0.5 · r²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sharpness: f64,
}

/// `exp(−λ · sqrt(0.5((x − x_m)² + (y − y_m)²)))`
pub fn g(x: f64, y: f64, xm: f64, ym: f64, lambda: f64) -> f64 {
    let (dx, dy) = (x - xm, y - ym);
    libm::exp(-lambda * libm::sqrt(0.5 * (dx * dx + dy * dy)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub wells: Vec<Well>,
}

impl Default for Landscape {
    /// Global minimum near (10, 10), local minima near (8, 3) and (3, 8).
    fn default() -> Self {
        let w = |x, y, amplitude, sharpness| Well {
            x,
            y,
            amplitude,
            sharpness,
        };
        Self {
            wells: vec![
                w(10.0, 10.0, 10.0, 0.1),
                w(8.0, 3.0, 5.0, 0.3),
                w(3.0, 8.0, 5.0, 0.3),
            ],
        }
    }
}

impl Landscape {
    pub fn f(&self, x: f64, y: f64) -> f64 {
        self.wells
            .iter()
            .map(|w| -w.amplitude * g(x, y, w.x, w.y, w.sharpness))
            .sum()
    }

    /// Exact gradient away from well centres.
    ///
    /// Each well is a cone at its centre (slope `A·λ/√2`), so the gradient is
    /// replaced there by the minimum-norm subgradient: zero when the pull of
    /// the other wells is weaker than the cone slope, otherwise that pull
    /// shortened by the slope.
    pub fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut gx, mut gy) = (0.0, 0.0);
        let mut cusp_slope = None;
        for w in &self.wells {
            let (dx, dy) = (x - w.x, y - w.y);
            let r = libm::sqrt(0.5 * (dx * dx + dy * dy));
            if r == 0.0 {
                cusp_slope = Some(w.amplitude * w.sharpness * core::f64::consts::FRAC_1_SQRT_2);
                continue;
            }
            // d/dx of −A·exp(−λr) = A·λ·exp(−λr)·dr/dx, with dr/dx = 0.5·dx/r
            let c = w.amplitude * w.sharpness * libm::exp(-w.sharpness * r) * 0.5 / r;
            gx += c * dx;
            gy += c * dy;
        }
        if let Some(slope) = cusp_slope {
            let norm = libm::hypot(gx, gy);
            if norm <= slope {
                return (0.0, 0.0);
            }
            let shrink = 1.0 - slope / norm;
            return (gx * shrink, gy * shrink);
        }
        (gx, gy)
    }
}

/// `f` on the default landscape.
pub fn f(x: f64, y: f64) -> f64 {
    Landscape::default().f(x, y)
}

/// Gradient of `f` on the default landscape.
pub fn grad_f(x: f64, y: f64) -> (f64, f64) {
    Landscape::default().grad(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyStrategy {
    None,
    Papa,
    Wash,
}

impl core::str::FromStr for ToyStrategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ToyStrategy::None),
            "papa" => Ok(ToyStrategy::Papa),
            "wash" => Ok(ToyStrategy::Wash),
            _ => Err(invalid("toy strategy must be none, papa or wash")),
        }
    }
}

/// What a selected coordinate does in the two-point shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyShuffle {
    /// Apply a uniform permutation of the two points (identity half the time).
    #[default]
    Permute,
    /// Always swap.
    Swap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub strategy: ToyStrategy,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub noise_sigma: f64,
    pub starts: [(f64, f64); 2],
    pub alpha: f64,
    /// EMA every `papa_period` steps.
    pub papa_period: usize,
    pub shuffle_p: f64,
    pub shuffle_mode: ToyShuffle,
    pub landscape: Landscape,
}

/// Noise scale used when none is given.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.5;

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            strategy: ToyStrategy::None,
            seed: 0,
            steps: 1000,
            lr: 0.1,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            starts: [(0.0, 5.0), (5.0, 0.0)],
            alpha: 0.99,
            papa_period: 1,
            shuffle_p: 0.01,
            shuffle_mode: ToyShuffle::Permute,
            landscape: Landscape::default(),
        }
    }
}

impl ToyConfig {
    pub fn with_strategy(strategy: ToyStrategy, seed: u64) -> Self {
        Self {
            strategy,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise sigma must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.shuffle_p) {
            return Err(invalid("shuffle probability outside [0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || self.papa_period == 0 {
            return Err(invalid("EMA needs alpha in (0, 1] and a positive period"));
        }
        Ok(())
    }
}

/// Random inputs consumed by one toy step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepDraws {
    /// Gradient noise `[point][coordinate]`.
    pub noise: [[f64; 2]; 2],
    /// Whether coordinate `j` is selected for shuffling.
    pub select: [bool; 2],
    /// Whether the permutation drawn for coordinate `j` swaps the points.
    pub swap: [bool; 2],
}

impl StepDraws {
    /// The same draws with the x and y roles exchanged.
    pub fn mirrored(&self) -> Self {
        Self {
            noise: [
                [self.noise[0][1], self.noise[0][0]],
                [self.noise[1][1], self.noise[1][0]],
            ],
            select: [self.select[1], self.select[0]],
            swap: [self.swap[1], self.swap[0]],
        }
    }
}

/// Source of per-step random inputs.
pub trait DrawSource {
    fn draw(&mut self, step: usize) -> StepDraws;
}

/// Draws keyed by `(seed, step)`.
#[derive(Debug, Clone)]
pub struct SeededDraws {
    seed: u64,
    noise: Normal<f64>,
    shuffle_p: f64,
}

impl SeededDraws {
    pub fn new(cfg: &ToyConfig) -> Result<Self> {
        Ok(Self {
            seed: cfg.seed,
            noise: Normal::new(0.0, cfg.noise_sigma).map_err(|_| invalid("bad noise sigma"))?,
            shuffle_p: cfg.shuffle_p,
        })
    }
}

impl DrawSource for SeededDraws {
    fn draw(&mut self, step: usize) -> StepDraws {
        let mut rng = stream(self.seed, Purpose::ToyNoise, &[step as u64]);
        let mut out = StepDraws::default();
        for point in &mut out.noise {
            for v in point.iter_mut() {
                *v = self.noise.sample(&mut rng);
            }
        }
        let mut rng = stream(self.seed, Purpose::ToyShuffle, &[step as u64]);
        for j in 0..2 {
            out.select[j] = rng.random::<f64>() < self.shuffle_p;
            out.swap[j] = rng.random::<bool>();
        }
        out
    }
}

impl DrawSource for &[StepDraws] {
    fn draw(&mut self, step: usize) -> StepDraws {
        self[step]
    }
}

/// Which minimum an endpoint settled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Global,
    /// Local well at (8, 3).
    LocalA,
    /// Local well at (3, 8).
    LocalB,
    None,
}

impl Endpoint {
    pub fn is_local(self) -> bool {
        matches!(self, Endpoint::LocalA | Endpoint::LocalB)
    }
}

/// Nearest default minimum within radius 1, else `None`.
pub fn classify_endpoint(point: (f64, f64)) -> Endpoint {
    let centres = [
        (Endpoint::Global, (10.0, 10.0)),
        (Endpoint::LocalA, (8.0, 3.0)),
        (Endpoint::LocalB, (3.0, 8.0)),
    ];
    let mut best = (Endpoint::None, 1.0);
    for (tag, (cx, cy)) in centres {
        let d = libm::hypot(point.0 - cx, point.1 - cy);
        if d <= best.1 {
            best = (tag, d);
        }
    }
    best.0
}

/// Positions of both points after every step; `path[0]` is the start.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub path: Vec<[(f64, f64); 2]>,
}

impl Trajectory {
    pub fn endpoints(&self) -> [(f64, f64); 2] {
        *self.path.last().expect("trajectory includes the start")
    }

    pub fn classify(&self) -> [Endpoint; 2] {
        let [a, b] = self.endpoints();
        [classify_endpoint(a), classify_endpoint(b)]
    }
}

pub fn run_toy(cfg: &ToyConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mut draws = SeededDraws::new(cfg)?;
    run_toy_with(cfg, &mut draws)
}

/// Runs with caller-supplied draws. Each step applies a noisy gradient step
/// to both points, then the coordination of `cfg.strategy`.
pub fn run_toy_with(cfg: &ToyConfig, draws: &mut impl DrawSource) -> Result<Trajectory> {
    cfg.validate()?;
    let mut pts = [
        [cfg.starts[0].0, cfg.starts[0].1],
        [cfg.starts[1].0, cfg.starts[1].1],
    ];
    let mut path = Vec::with_capacity(cfg.steps + 1);
    path.push(cfg.starts);
    for step in 0..cfg.steps {
        let d = draws.draw(step);
        for (p, noise) in pts.iter_mut().zip(&d.noise) {
            let (gx, gy) = cfg.landscape.grad(p[0], p[1]);
            p[0] -= cfg.lr * (gx + noise[0]);
            p[1] -= cfg.lr * (gy + noise[1]);
        }
        match cfg.strategy {
            ToyStrategy::None => {}
            ToyStrategy::Papa => {
                if (step + 1) % cfg.papa_period == 0 {
                    ema_pair(&mut pts, cfg.alpha);
                }
            }
            ToyStrategy::Wash => {
                for j in 0..2 {
                    let swap = match cfg.shuffle_mode {
                        ToyShuffle::Permute => d.select[j] && d.swap[j],
                        ToyShuffle::Swap => d.select[j],
                    };
                    if swap {
                        let t = pts[0][j];
                        pts[0][j] = pts[1][j];
                        pts[1][j] = t;
                    }
                }
            }
        }
        path.push([(pts[0][0], pts[0][1]), (pts[1][0], pts[1][1])]);
    }
    Ok(Trajectory { path })
}

fn ema_pair(pts: &mut [[f64; 2]; 2], alpha: f64) {
    for j in 0..2 {
        let mean = 0.5 * (pts[0][j] + pts[1][j]);
        for p in pts.iter_mut() {
            p[j] = alpha * p[j] + (1.0 - alpha) * mean;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g_oracle(x: f64, y: f64, xm: f64, ym: f64, lambda: f64) -> f64 {
        let r2 = (x - xm).powi(2) + (y - ym).powi(2);
        (-lambda * (r2 / 2.0).sqrt()).exp()
    }

    #[test]
    fn g_values() {
        assert_eq!(g(3.0, 8.0, 3.0, 8.0, 0.3), 1.0);
        assert!(g(1e6, 0.0, 0.0, 0.0, 0.1) < 1e-300);
        let expect = g_oracle(0.0, 0.0, 3.0, 4.0, 0.1);
        assert!((g(0.0, 0.0, 3.0, 4.0, 0.1) - expect).abs() < 1e-15);
        // sqrt(12.5) * 0.1
        assert!((expect - (-0.353_553_390_593_273_8f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn f_structure() {
        assert_eq!(f(3.0, 8.0), f(8.0, 3.0));
        let oracle = -10.0
            - 5.0 * g_oracle(10.0, 10.0, 8.0, 3.0, 0.3)
            - 5.0 * g_oracle(10.0, 10.0, 3.0, 8.0, 0.3);
        assert!((f(10.0, 10.0) - oracle).abs() < 1e-14);
        assert!(f(10.0, 10.0) < f(3.0, 8.0));
        assert!(f(10.0, 10.0) < f(8.0, 3.0));
    }

    #[test]
    fn grid_argmin_near_global() {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=1200 {
            for j in 0..=1200 {
                let (x, y) = (i as f64 * 0.01, j as f64 * 0.01);
                let v = f(x, y);
                if v < best.0 {
                    best = (v, x, y);
                }
            }
        }
        assert!(
            (best.1 - 10.0).abs() <= 0.05 && (best.2 - 10.0).abs() <= 0.05,
            "{best:?}"
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream(1, Purpose::ToyNoise, &[]);
        let h = 1e-6;
        for _ in 0..100 {
            let (x, y) = (rng.random_range(-2.0..14.0), rng.random_range(-2.0..14.0));
            let (gx, gy) = grad_f(x, y);
            let fx = (f(x + h, y) - f(x - h, y)) / (2.0 * h);
            let fy = (f(x, y + h) - f(x, y - h)) / (2.0 * h);
            for (a, n) in [(gx, fx), (gy, fy)] {
                assert!(
                    (a - n).abs() <= 1e-6 * a.abs().max(n.abs()) + 1e-9,
                    "{a} vs {n} at ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn noiseless_point_stays_at_local_minimum() {
        let cfg = ToyConfig {
            noise_sigma: 0.0,
            starts: [(3.0, 8.0), (8.0, 3.0)],
            ..ToyConfig::default()
        };
        let t = run_toy(&cfg).unwrap();
        for [(x, y), (u, v)] in &t.path {
            assert!((x - 3.0).abs() < 1e-6 && (y - 8.0).abs() < 1e-6);
            assert!((u - 8.0).abs() < 1e-6 && (v - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cusp_subgradient() {
        // lone well: its centre is a minimum
        let lone = Landscape {
            wells: vec![Well {
                x: 1.0,
                y: 2.0,
                amplitude: 3.0,
                sharpness: 0.4,
            }],
        };
        assert_eq!(lone.grad(1.0, 2.0), (0.0, 0.0));
        // a strong outside pull beats a shallow cone
        let pulled = Landscape {
            wells: vec![
                Well {
                    x: 0.0,
                    y: 0.0,
                    amplitude: 0.1,
                    sharpness: 0.1,
                },
                Well {
                    x: 3.0,
                    y: 0.0,
                    amplitude: 50.0,
                    sharpness: 0.5,
                },
            ],
        };
        let (gx, gy) = pulled.grad(0.0, 0.0);
        assert!(gx < 0.0 && gy == 0.0);
        assert_eq!(grad_f(3.0, 8.0), (0.0, 0.0));
    }

    #[test]
    fn classification() {
        assert_eq!(classify_endpoint((10.2, 9.9)), Endpoint::Global);
        assert_eq!(classify_endpoint((8.0, 3.5)), Endpoint::LocalA);
        assert_eq!(classify_endpoint((2.5, 8.0)), Endpoint::LocalB);
        assert_eq!(classify_endpoint((5.0, 5.0)), Endpoint::None);
    }

    #[test]
    fn shuffle_preserves_pair_multiset() {
        let cfg = ToyConfig {
            shuffle_p: 0.3,
            ..ToyConfig::with_strategy(ToyStrategy::Wash, 3)
        };
        let mut draws = SeededDraws::new(&cfg).unwrap();
        let recorded: Vec<StepDraws> = (0..cfg.steps).map(|s| draws.draw(s)).collect();
        let with = run_toy_with(&cfg, &mut recorded.as_slice()).unwrap();
        let without = run_toy_with(
            &ToyConfig {
                strategy: ToyStrategy::None,
                ..cfg.clone()
            },
            &mut recorded.as_slice(),
        )
        .unwrap();
        // first step: both runs take the same gradient step, then the shuffle permutes
        let [a, b] = with.path[1];
        let [c, d] = without.path[1];
        let mut xs = [a.0, b.0];
        let mut ys = [a.1, b.1];
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let mut xs2 = [c.0, d.0];
        let mut ys2 = [c.1, d.1];
        xs2.sort_by(f64::total_cmp);
        ys2.sort_by(f64::total_cmp);
        assert_eq!((xs, ys), (xs2, ys2));
        assert!(recorded.iter().any(|r| r.select[0] && r.swap[0]));
    }

    #[test]
    fn ema_contracts_pair_distance() {
        let mut pts = [[0.0, 5.0], [5.0, 0.0]];
        let before = libm::hypot(pts[0][0] - pts[1][0], pts[0][1] - pts[1][1]);
        ema_pair(&mut pts, 0.99);
        let after = libm::hypot(pts[0][0] - pts[1][0], pts[0][1] - pts[1][1]);
        assert!((after / before - 0.99).abs() < 1e-12);
    }

    #[test]
    fn mirrored_runs_mirror() {
        for strategy in [ToyStrategy::None, ToyStrategy::Papa, ToyStrategy::Wash] {
            let cfg = ToyConfig {
                shuffle_p: 0.05,
                ..ToyConfig::with_strategy(strategy, 11)
            };
            let mut draws = SeededDraws::new(&cfg).unwrap();
            let rec: Vec<StepDraws> = (0..cfg.steps).map(|s| draws.draw(s)).collect();
            let mir: Vec<StepDraws> = rec.iter().map(StepDraws::mirrored).collect();
            let a = run_toy_with(&cfg, &mut rec.as_slice()).unwrap();
            let mcfg = ToyConfig {
                starts: [(5.0, 0.0), (0.0, 5.0)],
                ..cfg.clone()
            };
            let b = run_toy_with(&mcfg, &mut mir.as_slice()).unwrap();
            for (p, q) in a.path.iter().zip(&b.path) {
                for k in 0..2 {
                    assert!((p[k].0 - q[k].1).abs() < 1e-9 && (p[k].1 - q[k].0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let cfg = ToyConfig::with_strategy(ToyStrategy::Wash, 5);
        assert_eq!(run_toy(&cfg).unwrap(), run_toy(&cfg).unwrap());
    }
}
