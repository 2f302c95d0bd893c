//! Metrics, full-corpus evaluation, and the verification/benchmark harnesses.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::Mode;
use crate::data::{EvalCase, ItemCatalog};
use crate::error::{Error, Result};
use crate::model::{forward_user, score_candidates, ModelConfig, ModelParams};
use crate::ssd::{quadratic_is_cheaper, recurrent_values, quadratic_values};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// 1 when the target sits in the top k of the ranking.
pub fn recall_at_k(ranked_ids: &[usize], target: usize, k: usize) -> f64 {
    ranked_ids.iter().take(k).any(|&id| id == target) as u8 as f64
}

/// 1/log2(rank+1) for the single relevant item, 0 past the cutoff.
pub fn ndcg_at_k(ranked_ids: &[usize], target: usize, k: usize) -> f64 {
    match ranked_ids.iter().take(k).position(|&id| id == target) {
        Some(pos) => 1.0 / ((pos as f64 + 2.0).log2()),
        None => 0.0,
    }
}

/// Item ids sorted by descending score; ties broken by ascending internal
/// index so rankings are deterministic.
pub fn rank_items(ids: &[usize], scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(ids[a].cmp(&ids[b]))
    });
    order.into_iter().map(|i| ids[i]).collect()
}

/// Retrieval quality over a split; `metrics` carries recall@K / ndcg@K pairs.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub user_count: usize,
    pub mean_rank: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.metrics.get(&format!("recall@{k}")).copied().unwrap_or(0.0)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.metrics.get(&format!("ndcg@{k}")).copied().unwrap_or(0.0)
    }
}

fn accumulate_report(
    rankings: impl Iterator<Item = (Vec<usize>, usize)>,
    ks: &[usize],
) -> EvalReport {
    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
    let mut rank_sum = 0.0f64;
    let mut count = 0usize;
    for (ranked, target) in rankings {
        for &k in ks {
            *metrics.entry(format!("recall@{k}")).or_default() += recall_at_k(&ranked, target, k);
            *metrics.entry(format!("ndcg@{k}")).or_default() += ndcg_at_k(&ranked, target, k);
        }
        let rank = ranked.iter().position(|&id| id == target).map(|p| p + 1).unwrap_or(ranked.len());
        rank_sum += rank as f64;
        count += 1;
    }
    for v in metrics.values_mut() {
        *v /= count.max(1) as f64;
    }
    EvalReport { user_count: count, mean_rank: rank_sum / count.max(1) as f64, metrics }
}

/// Rank the full item set (pad excluded) for every case and average the
/// metrics. Deterministic: fixed case order, index tie-break.
pub fn evaluate_cases(
    cases: &[EvalCase],
    catalog: &ItemCatalog,
    params: &ModelParams,
    cfg: &ModelConfig,
    ks: &[usize],
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Contract { op: "evaluate_cases", msg: "empty split".into() });
    }
    let all_ids: Vec<usize> = (1..=catalog.len()).collect();
    let mut rankings = Vec::with_capacity(cases.len());
    for case in cases {
        let tape = Tape::new();
        let (u, _) = forward_user(&tape, &case.prefix, catalog, params, cfg, Mode::Eval)?;
        let scores = score_candidates(&tape, &u, catalog, params, cfg, &all_ids)?;
        rankings.push((rank_items(&all_ids, scores.data()), case.target));
    }
    Ok(accumulate_report(rankings.into_iter(), ks))
}

/// Metric floor: every item scored by an independent uniform draw.
pub fn evaluate_random_scorer(
    cases: &[EvalCase],
    num_items: usize,
    ks: &[usize],
    seed: u64,
) -> EvalReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_ids: Vec<usize> = (1..=num_items).collect();
    let rankings = cases.iter().map(|case| {
        let scores: Vec<f32> = (0..num_items).map(|_| rng.gen::<f32>()).collect();
        (rank_items(&all_ids, &scores), case.target)
    });
    accumulate_report(rankings, ks)
}

// ---- duality verification -----------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct DualityCheck {
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub max_abs_diff: f32,
    pub grad_rel_err: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct FiniteDiffCheck {
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub max_rel_err: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct DualityReport {
    pub checks: Vec<DualityCheck>,
    pub fd_checks: Vec<FiniteDiffCheck>,
    pub max_abs_diff: f32,
    pub max_grad_rel_err: f32,
    pub max_fd_rel_err: f32,
    pub all_pass: bool,
    pub value_tolerance: f32,
    pub grad_tolerance: f32,
    /// Worst-case |entry| of the literal-mode (non-exponential) decay mask;
    /// informational evidence of sign-alternating growth.
    pub literal_mode_max_entry: f32,
}

fn rel_err(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-2))
        .fold(0.0, f32::max)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Cross-form value and gradient agreement over the verification grid, plus
/// central finite differences on the small corner of the grid.
pub fn verify_duality(seed: u64, ls: &[usize], ds: &[usize], ns: &[usize]) -> DualityReport {
    const VALUE_TOL: f32 = 1e-5;
    const GRAD_TOL: f32 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut fd_checks = Vec::new();
    let mut max_abs_diff = 0.0f32;
    let mut max_grad = 0.0f32;
    let mut max_fd = 0.0f32;

    for &l in ls {
        for &d in ds {
            for &n in ns {
                let c = Tensor::new(&[l, d], rand_vec(&mut rng, l * d, -0.5, 0.5)).unwrap();
                let bbar = Tensor::new(&[l, d], rand_vec(&mut rng, l * d, -0.5, 0.5)).unwrap();
                let x = Tensor::new(&[l, n], rand_vec(&mut rng, l * n, -0.5, 0.5)).unwrap();
                let a = Tensor::vector(&rand_vec(&mut rng, l, 0.05, 1.0));
                let weights = Tensor::new(&[l, n], rand_vec(&mut rng, l * n, -1.0, 1.0)).unwrap();

                let run = |quadratic: bool| -> (Vec<f32>, Vec<Vec<f32>>) {
                    let tape = Tape::new();
                    let cw = tape.watch(&c);
                    let bw = tape.watch(&bbar);
                    let aw = tape.watch(&a);
                    let xw = tape.watch(&x);
                    let y = if quadratic {
                        crate::ssd::ssd_quadratic_from_decay(&tape, &cw, &bw, &aw, &xw).unwrap()
                    } else {
                        crate::ssd::ssd_recurrent(&tape, &cw, &bw, &aw, &xw).unwrap()
                    };
                    let loss = tape.sum(&tape.mul(&y, &weights).unwrap());
                    let grads = tape.backward(&loss).unwrap();
                    let g = [&cw, &bw, &aw, &xw]
                        .iter()
                        .map(|t| grads.wrt(t).unwrap().data().to_vec())
                        .collect();
                    (y.into_data(), g)
                };
                let (yq, gq) = run(true);
                let (yr, gr) = run(false);
                let diff = yq
                    .iter()
                    .zip(&yr)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                let grad_err = gq
                    .iter()
                    .zip(&gr)
                    .map(|(a, b)| rel_err(a, b))
                    .fold(0.0f32, f32::max);
                max_abs_diff = max_abs_diff.max(diff);
                max_grad = max_grad.max(grad_err);
                checks.push(DualityCheck { l, d, n, max_abs_diff: diff, grad_rel_err: grad_err });

                // finite differences stay affordable on the small corner
                if l <= 6 && d <= 4 && n <= 3 {
                    let fd = fd_check(&c, &bbar, &a, &x, &weights);
                    max_fd = max_fd.max(fd);
                    fd_checks.push(FiniteDiffCheck { l, d, n, max_rel_err: fd });
                }
            }
        }
    }

    // literal decay reading: products alternate sign and can grow
    let lit = {
        let tape = Tape::new();
        let a = Tensor::vector(&rand_vec(&mut rng, 16, -1.5, 1.5));
        let mask = tape.decay_mask(&a).unwrap();
        mask.data().iter().map(|v| v.abs()).fold(0.0f32, f32::max)
    };

    DualityReport {
        max_abs_diff,
        max_grad_rel_err: max_grad,
        max_fd_rel_err: max_fd,
        all_pass: max_abs_diff < VALUE_TOL && max_grad < GRAD_TOL && max_fd < GRAD_TOL,
        value_tolerance: VALUE_TOL,
        grad_tolerance: GRAD_TOL,
        literal_mode_max_entry: lit,
        checks,
        fd_checks,
    }
}

/// Central finite differences (h = 1e-3) of the recurrent form against its
/// tape gradients, over every input tensor.
fn fd_check(c: &Tensor, bbar: &Tensor, a: &Tensor, x: &Tensor, weights: &Tensor) -> f32 {
    let h = 1e-3f32;
    let loss_of = |c: &Tensor, b: &Tensor, a: &Tensor, x: &Tensor| -> f64 {
        let tape = Tape::new();
        let y = crate::ssd::ssd_recurrent(&tape, c, b, a, x).unwrap();
        y.data()
            .iter()
            .zip(weights.data())
            .map(|(&v, &w)| v as f64 * w as f64)
            .sum()
    };

    let tape = Tape::new();
    let cw = tape.watch(c);
    let bw = tape.watch(bbar);
    let aw = tape.watch(a);
    let xw = tape.watch(x);
    let y = crate::ssd::ssd_recurrent(&tape, &cw, &bw, &aw, &xw).unwrap();
    let loss = tape.sum(&tape.mul(&y, weights).unwrap());
    let grads = tape.backward(&loss).unwrap();

    let mut worst = 0.0f32;
    let tensors: [(&Tensor, &Tensor); 4] = [(c, &cw), (bbar, &bw), (a, &aw), (x, &xw)];
    for (base, watched) in tensors {
        let ad = grads.wrt(watched).unwrap();
        for i in 0..base.numel() {
            let mut plus = base.data().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let tp = Tensor::new(base.dims(), plus).unwrap();
            let tm = Tensor::new(base.dims(), minus).unwrap();
            let args_p = replace(&tensors, base, &tp);
            let args_m = replace(&tensors, base, &tm);
            let fd = ((loss_of(args_p[0], args_p[1], args_p[2], args_p[3])
                - loss_of(args_m[0], args_m[1], args_m[2], args_m[3]))
                / (2.0 * h as f64)) as f32;
            let adv = ad.data()[i];
            let err = (adv - fd).abs() / adv.abs().max(fd.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    worst
}

fn replace<'a>(
    tensors: &[(&'a Tensor, &'a Tensor); 4],
    which: &Tensor,
    with: &'a Tensor,
) -> [&'a Tensor; 4] {
    let mut out = [tensors[0].0, tensors[1].0, tensors[2].0, tensors[3].0];
    for (i, (base, _)) in tensors.iter().enumerate() {
        if std::ptr::eq(*base, which) {
            out[i] = with;
        }
    }
    out
}

// ---- kernel benchmark -----------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct BenchPoint {
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub quadratic_us: f64,
    pub recurrent_us: f64,
    pub max_abs_diff: f32,
    pub auto_choice: String,
    pub empirically_faster: String,
    pub auto_matches: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    pub auto_match_fraction: f64,
    pub max_abs_diff: f32,
}

/// Grid points with a clear winner on each side of the cost model.
pub fn default_bench_grid() -> Vec<(usize, usize, usize)> {
    vec![
        (2, 32, 32),
        (4, 32, 64),
        (4, 64, 64),
        (4, 64, 256),
        (8, 64, 256),
        (8, 128, 128),
        (50, 8, 8),
        (64, 8, 8),
        (64, 16, 16),
        (128, 4, 16),
        (128, 8, 8),
        (200, 8, 8),
    ]
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Median wall-times of the two raw kernels per grid point, their numerical
/// agreement, and whether the cost model picked the faster one.
pub fn bench_kernels(grid: &[(usize, usize, usize)], repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::Contract { op: "bench_kernels", msg: "repeats must be >= 3".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut matches = 0usize;
    let mut max_diff = 0.0f32;
    for &(l, d, n) in grid {
        let c = rand_vec(&mut rng, l * d, -0.5, 0.5);
        let bbar = rand_vec(&mut rng, l * d, -0.5, 0.5);
        let a = rand_vec(&mut rng, l, 0.05, 1.0);
        let x = rand_vec(&mut rng, l * n, -0.5, 0.5);

        let mut tq = Vec::with_capacity(repeats);
        let mut tr = Vec::with_capacity(repeats);
        let mut yq = Vec::new();
        let mut yr = Vec::new();
        for _ in 0..repeats {
            let t0 = Instant::now();
            yq = quadratic_values(&c, &bbar, &a, &x, l, d, n);
            tq.push(t0.elapsed().as_secs_f64() * 1e6);
            let t0 = Instant::now();
            yr = recurrent_values(&c, &bbar, &a, &x, l, d, n);
            tr.push(t0.elapsed().as_secs_f64() * 1e6);
        }
        let diff = yq.iter().zip(&yr).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        max_diff = max_diff.max(diff);
        let quadratic_us = median(tq);
        let recurrent_us = median(tr);
        let auto_quadratic = quadratic_is_cheaper(l, d, n);
        let faster_quadratic = quadratic_us <= recurrent_us;
        let auto_matches = auto_quadratic == faster_quadratic;
        matches += auto_matches as usize;
        points.push(BenchPoint {
            l,
            d,
            n,
            quadratic_us,
            recurrent_us,
            max_abs_diff: diff,
            auto_choice: if auto_quadratic { "quadratic" } else { "recurrent" }.into(),
            empirically_faster: if faster_quadratic { "quadratic" } else { "recurrent" }.into(),
            auto_matches,
        });
    }
    Ok(BenchReport {
        auto_match_fraction: matches as f64 / grid.len().max(1) as f64,
        max_abs_diff: max_diff,
        points,
    })
}

// ---- truncation probe -------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TruncationRow {
    pub length: usize,
    pub user_count: usize,
    pub mean_rank: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// Re-evaluate with histories truncated to each length.
pub fn truncation_probe(
    cases: &[EvalCase],
    catalog: &ItemCatalog,
    params: &ModelParams,
    cfg: &ModelConfig,
    lengths: &[usize],
    ks: &[usize],
) -> Result<Vec<TruncationRow>> {
    let mut rows = Vec::new();
    for &len in lengths {
        if len == 0 {
            return Err(Error::Contract { op: "truncation_probe", msg: "length must be positive".into() });
        }
        let truncated: Vec<EvalCase> = cases
            .iter()
            .map(|c| EvalCase {
                user_id: c.user_id.clone(),
                prefix: c.prefix.truncated(len),
                target: c.target,
            })
            .collect();
        let report = evaluate_cases(&truncated, catalog, params, cfg, ks)?;
        rows.push(TruncationRow {
            length: len,
            user_count: report.user_count,
            mean_rank: report.mean_rank,
            metrics: report.metrics,
        });
    }
    Ok(rows)
}

/// CSV rendering of the probe: one row per length.
pub fn truncation_csv(rows: &[TruncationRow], ks: &[usize]) -> String {
    let mut header = String::from("length,user_count,mean_rank");
    for &k in ks {
        header.push_str(&format!(",recall@{k},ndcg@{k}"));
    }
    let mut out = header + "\n";
    for row in rows {
        let mut line = format!("{},{},{:.6}", row.length, row.user_count, row.mean_rank);
        for &k in ks {
            line.push_str(&format!(
                ",{:.6},{:.6}",
                row.metrics.get(&format!("recall@{k}")).copied().unwrap_or(0.0),
                row.metrics.get(&format!("ndcg@{k}")).copied().unwrap_or(0.0)
            ));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_closed_forms() {
        let ranked = vec![3, 1, 7, 2, 9];
        assert_eq!(recall_at_k(&ranked, 3, 10), 1.0);
        assert_eq!(ndcg_at_k(&ranked, 3, 10), 1.0);
        // rank 3: 1/log2(4) = 0.5
        assert!((ndcg_at_k(&ranked, 7, 10) - 0.5).abs() < 1e-12);
        // outside the cutoff
        assert_eq!(recall_at_k(&ranked, 7, 2), 0.0);
        assert_eq!(ndcg_at_k(&ranked, 7, 2), 0.0);
    }

    #[test]
    fn rank_ties_break_by_index() {
        let ids = vec![1, 2, 3, 4];
        let scores = vec![0.5, 0.5, 0.9, 0.5];
        assert_eq!(rank_items(&ids, &scores), vec![3, 1, 2, 4]);
    }

    #[test]
    fn random_scorer_matches_analytic_expectation() {
        let cases: Vec<EvalCase> = (0..400)
            .map(|i| EvalCase {
                user_id: format!("u{i}"),
                prefix: crate::data::UserSequence { items: vec![1], timestamps: vec![0] },
                target: (i % 50) + 1,
            })
            .collect();
        let report = evaluate_random_scorer(&cases, 50, &[10], 123);
        let p = 10.0 / 50.0;
        let sigma = (p * (1.0 - p) / 400.0f64).sqrt();
        assert!(
            (report.recall(10) - p).abs() <= 3.0 * sigma,
            "recall {} vs expected {p} (3 sigma {})",
            report.recall(10),
            3.0 * sigma
        );
    }

    #[test]
    fn duality_small_grid_passes() {
        let report = verify_duality(5, &[1, 2, 5, 8], &[1, 3], &[1, 2], );
        assert!(report.all_pass, "max diff {}, grad {}", report.max_abs_diff, report.max_grad_rel_err);
    }

    #[test]
    fn bench_report_agrees_numerically() {
        let report = bench_kernels(&[(8, 4, 4), (16, 4, 4)], 3, 7).unwrap();
        assert!(report.max_abs_diff < 1e-5);
        assert!(bench_kernels(&[(4, 4, 4)], 2, 7).is_err());
    }

    #[test]
    fn truncation_beyond_history_is_a_noop() {
        use crate::model::{init_params, ModelConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let num_items = 10usize;
        let dim = 4usize;
        let catalog = crate::data::ItemCatalog::new(
            (0..num_items).map(|i| format!("i{i}")).collect(),
            dim,
            dim,
            (0..num_items * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..num_items * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            vec![true; num_items],
        )
        .unwrap();
        let cfg = ModelConfig {
            latent_dim: 8,
            state_dim: 4,
            conv_kernel: 3,
            max_seq_len: 8,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 72, dim, dim, num_items).unwrap();
        let cases: Vec<EvalCase> = (0..5)
            .map(|i| EvalCase {
                user_id: format!("u{i}"),
                prefix: crate::data::UserSequence {
                    items: vec![1 + i % num_items, 1 + (i + 3) % num_items, 1 + (i + 5) % num_items],
                    timestamps: vec![10, 500, 900],
                },
                target: 1 + (i + 7) % num_items,
            })
            .collect();
        let rows = truncation_probe(&cases, &catalog, &params, &cfg, &[3, 100], &[10]).unwrap();
        assert_eq!(rows[0].metrics, rows[1].metrics);
        assert_eq!(rows[0].mean_rank, rows[1].mean_rank);
        assert!(truncation_probe(&cases, &catalog, &params, &cfg, &[0], &[10]).is_err());
    }

    #[test]
    fn truncation_csv_schema() {
        let rows = vec![TruncationRow {
            length: 5,
            user_count: 10,
            mean_rank: 3.2,
            metrics: BTreeMap::from([
                ("recall@10".to_string(), 0.5),
                ("ndcg@10".to_string(), 0.25),
            ]),
        }];
        let csv = truncation_csv(&rows, &[10]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "length,user_count,mean_rank,recall@10,ndcg@10");
        assert!(lines.next().unwrap().starts_with("5,10,"));
    }
}
