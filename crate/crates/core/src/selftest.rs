//! Seeded oracle suites comparing production kernels with [`crate::oracle`].

use crate::blend::{alpha_weights, blend_residual};
use crate::lora::LoraDelta;
use crate::mmdit::{AttentionCapture, ResidualRecord, Stream, Sublayer};
use crate::oracle;
use crate::prior::{argmax_partition, attention_map, BinaryPrior};
use crate::rng::SeededStream;
use crate::tensor::{
    connected_components, conv2d_same, matmul, morph_reconstruct, quantile, row_softmax, BinaryGrid,
    Connectivity, FeatureMatrix, GaussianKernel, Grid2D,
};

/// Deliberate defects for checking that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Perturbs one weight of the Gaussian kernel under test.
    ConvKernel,
}

impl std::str::FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conv-kernel" => Ok(Mutation::ConvKernel),
            other => Err(format!("unknown mutation '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub invariant: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Description of the first failing case.
    pub first_failure: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Suite {
    name: &'static str,
    invariant: &'static str,
    cases: usize,
    failures: usize,
    first: Option<String>,
}

impl Suite {
    fn new(name: &'static str, invariant: &'static str) -> Self {
        Self {
            name,
            invariant,
            cases: 0,
            failures: 0,
            first: None,
        }
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.first.is_none() {
                self.first = Some(detail());
            }
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            invariant: self.invariant,
            cases: self.cases,
            failures: self.failures,
            first_failure: self.first,
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_matrix(s: &mut SeededStream, rows: usize, cols: usize) -> FeatureMatrix {
    FeatureMatrix::from_fn(rows, cols, |_, _| s.normal())
}

fn random_grid(s: &mut SeededStream, h: usize, w: usize) -> Grid2D {
    Grid2D::from_fn(h, w, |_, _| s.unit())
}

fn suite_matmul() -> SuiteResult {
    let mut suite = Suite::new("matmul", "matmul equals the triple-loop product within 1e-12");
    for seed in 0..50 {
        let mut s = SeededStream::new(seed, 10);
        let (n, k, m) = (1 + s.below(12), 1 + s.below(12), 1 + s.below(12));
        let a = random_matrix(&mut s, n, k);
        let b = random_matrix(&mut s, k, m);
        let got = matmul(&a, &b).expect("shapes agree");
        let d = max_diff(got.data(), oracle::matmul(&a, &b).data());
        suite.check(d <= 1e-12, || format!("seed {seed}: max diff {d:e}"));
    }
    suite.finish()
}

fn suite_softmax() -> SuiteResult {
    let mut suite = Suite::new("softmax", "row_softmax equals the scalar softmax within 1e-12");
    for seed in 0..50 {
        let mut s = SeededStream::new(seed, 11);
        let (r, c) = (1 + s.below(8), 1 + s.below(16));
        let m = random_matrix(&mut s, r, c);
        let got = row_softmax(&m);
        let mut d: f64 = 0.0;
        for i in 0..m.rows() {
            d = d.max(max_diff(got.row(i), &oracle::softmax_row(m.row(i))));
        }
        suite.check(d <= 1e-12, || format!("seed {seed}: max diff {d:e}"));
    }
    suite.finish()
}

fn suite_conv(mutation: Option<Mutation>) -> SuiteResult {
    let mut suite = Suite::new(
        "conv",
        "conv2d_same equals the replicate-padded Gaussian reference within 1e-12",
    );
    for seed in 0..50 {
        let mut s = SeededStream::new(seed, 12);
        let size = [1, 3, 5][s.below(3)];
        let sigma = s.uniform(0.3, 3.0);
        let (h, w) = (size + s.below(10), size + s.below(10));
        let g = random_grid(&mut s, h, w);
        let mut kernel = GaussianKernel::new(size, sigma).expect("valid kernel");
        if mutation == Some(Mutation::ConvKernel) {
            let mut wts = kernel.weights().to_vec();
            wts[0] += 0.05;
            kernel = GaussianKernel::from_raw(size, sigma, wts).expect("same size");
        }
        let reference = oracle::gaussian_weights(size, sigma);
        let dk = max_diff(kernel.weights(), &reference);
        let got = conv2d_same(&g, &kernel).expect("kernel fits");
        let d = max_diff(got.data(), oracle::conv_replicate(&g, &reference, size).data()).max(dk);
        suite.check(d <= 1e-12, || format!("seed {seed} (k={size}, {h}x{w}): max diff {d:e}"));
    }
    suite.finish()
}

fn suite_quantile() -> SuiteResult {
    let mut suite = Suite::new("quantile", "quantile equals the nearest-rank value of a full sort");
    for seed in 0..50 {
        let mut s = SeededStream::new(seed, 13);
        let (h, w) = (1 + s.below(10), 1 + s.below(10));
        let g = random_grid(&mut s, h, w);
        for q in [0.0, 0.1, 0.5, 0.7, 0.9, 1.0] {
            let got = quantile(&g, q).expect("non-empty");
            let want = oracle::sort_quantile(g.data(), q);
            suite.check(got == want, || format!("seed {seed}, q {q}: {got} vs {want}"));
        }
    }
    suite.finish()
}

fn suite_flood_fill() -> SuiteResult {
    let mut suite = Suite::new("flood-fill", "component counts equal recursive flood fill");
    for seed in 0..50 {
        let mut s = SeededStream::new(seed, 14);
        let p = s.uniform(0.2, 0.7);
        let (h, w) = (2 + s.below(14), 2 + s.below(14));
        let b = BinaryGrid::from_fn(h, w, |_, _| s.unit() < p);
        for (conn, eight) in [(Connectivity::Eight, true), (Connectivity::Four, false)] {
            let got = connected_components(&b, conn).count;
            let want = oracle::flood_fill_count(&b, eight);
            suite.check(got == want, || format!("seed {seed} ({conn:?}): {got} vs {want}"));
        }
    }
    suite.finish()
}

fn suite_reconstruction() -> SuiteResult {
    let mut suite = Suite::new(
        "reconstruction",
        "morph_reconstruct equals the widest-path fixpoint exactly",
    );
    for seed in 0..50 {
        let mut s = SeededStream::new(seed, 15);
        let (h, w) = (2 + s.below(12), 2 + s.below(12));
        let mask = random_grid(&mut s, h, w);
        let marker = Grid2D::from_fn(mask.height(), mask.width(), |y, x| {
            if s.unit() < 0.1 {
                mask.get(y, x) * s.unit()
            } else {
                0.0
            }
        });
        let got = morph_reconstruct(&marker, &mask).expect("marker below mask");
        let want = oracle::widest_path_reconstruct(&marker, &mask);
        let ok = got.data() == want.data();
        suite.check(ok, || format!("seed {seed}: max diff {:e}", max_diff(got.data(), want.data())));
    }
    suite.finish()
}

fn suite_svd_rank() -> SuiteResult {
    let mut suite = Suite::new("svd-rank", "LoRA increments have numerical rank at most r (tol 1e-8)");
    for seed in 0..50 {
        let mut s = SeededStream::new(seed, 16);
        let (d, k) = (2 + s.below(30), 2 + s.below(30));
        let r = 1 + s.below(d.min(k));
        let a = random_matrix(&mut s, r, k);
        let b = random_matrix(&mut s, d, r);
        let delta = LoraDelta::new("x", a, b, s.uniform(0.1, 2.0)).expect("consistent shapes");
        let rank = oracle::numerical_rank(&delta.increment(), 1e-8);
        suite.check(rank <= r, || format!("seed {seed}: rank {rank} > r = {r}"));
    }
    suite.finish()
}

fn suite_blend() -> SuiteResult {
    let mut suite = Suite::new("blend", "blend_residual equals the token loop bit for bit");
    for seed in 0..100 {
        let mut s = SeededStream::new(seed, 17);
        let (h, w) = (1 + s.below(8), 1 + s.below(8));
        let (t, c, n) = (1 + s.below(8), 1 + s.below(32), 1 + s.below(4));
        let stream = [Stream::Image, Stream::Joint][s.below(2)];
        let offset = if stream == Stream::Joint { t } else { 0 };
        let rows = offset + h * w;
        let p = s.unit();
        let priors: Vec<BinaryPrior> = (0..n)
            .map(|u| BinaryPrior {
                subject: u,
                mask: BinaryGrid::from_fn(h, w, |_, _| s.unit() < p),
            })
            .collect();
        let rec = |values| ResidualRecord {
            block: 0,
            sublayer: Sublayer::Attention,
            stream,
            values,
        };
        let base = rec(random_matrix(&mut s, rows, c));
        let adapters: Vec<ResidualRecord> = (0..n).map(|_| rec(random_matrix(&mut s, rows, c))).collect();
        let alpha = alpha_weights(&priors, 1e-6).expect("priors agree");
        let refs: Vec<&ResidualRecord> = adapters.iter().collect();
        let got = blend_residual(&base, &refs, &alpha, t).expect("records agree");
        let masks: Vec<Vec<bool>> = priors.iter().map(|p| p.mask.data().to_vec()).collect();
        let fs: Vec<&FeatureMatrix> = adapters.iter().map(|r| &r.values).collect();
        let want = oracle::blend_rows(&base.values, &fs, &masks, offset, h * w, 1e-6);
        let ok = got
            .data()
            .iter()
            .zip(want.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        suite.check(ok, || format!("seed {seed}: blended record differs from the token loop"));
    }
    suite.finish()
}

fn suite_attention() -> SuiteResult {
    let mut suite = Suite::new("attention", "attention_map equals the scalar softmax-select within 1e-9");
    for seed in 0..30 {
        let mut s = SeededStream::new(seed, 18);
        let (h, w, t, d, heads) = (2 + s.below(6), 2 + s.below(6), 2 + s.below(7), 1 + s.below(8), 1 + s.below(4));
        let cap = AttentionCapture {
            block: 0,
            image_queries: (0..heads).map(|_| random_matrix(&mut s, h * w, d)).collect(),
            text_keys: (0..heads).map(|_| random_matrix(&mut s, t, d)).collect(),
        };
        let mut tokens: Vec<usize> = (0..t).filter(|_| s.unit() < 0.5).collect();
        // Selecting every key gives a constant map, which renorm sends to zero.
        if tokens.is_empty() || tokens.len() == t {
            tokens = vec![s.below(t)];
        }
        let got = attention_map(&cap, &tokens, h, w).expect("valid capture");
        let want = oracle::attention_map(&cap.image_queries, &cap.text_keys, &tokens);
        let dd = max_diff(got.data(), &want);
        suite.check(dd <= 1e-9, || format!("seed {seed}: max diff {dd:e}"));
    }
    suite.finish()
}

fn suite_partition() -> SuiteResult {
    let mut suite = Suite::new(
        "partition",
        "argmax_partition equals the per-cell scalar argmax and covers the grid disjointly",
    );
    for seed in 0..50 {
        let mut s = SeededStream::new(seed, 19);
        let (h, w, n) = (1 + s.below(12), 1 + s.below(12), 1 + s.below(4));
        let maps: Vec<Grid2D> = (0..n).map(|_| random_grid(&mut s, h, w)).collect();
        let priors = argmax_partition(&maps).expect("shapes agree");
        let ok = (0..h * w).all(|cell| {
            let owners: Vec<usize> = (0..n).filter(|&u| priors[u].mask.data()[cell]).collect();
            owners == [oracle::argmax_owner(&maps, cell)]
        });
        suite.check(ok, || format!("seed {seed}: partition differs from the scalar argmax"));
    }
    suite.finish()
}

/// Runs every suite in a fixed order.
pub fn run_selftest(mutation: Option<Mutation>) -> Vec<SuiteResult> {
    vec![
        suite_matmul(),
        suite_softmax(),
        suite_conv(mutation),
        suite_quantile(),
        suite_flood_fill(),
        suite_reconstruction(),
        suite_svd_rank(),
        suite_blend(),
        suite_attention(),
        suite_partition(),
    ]
}
