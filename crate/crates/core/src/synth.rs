//! Desk-scale synthetic corpus generator with planted structure: the next
//! interaction is the feature-nearest neighbor of the current item, so the
//! held-out targets are predictable from the final history entry alone.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::InteractionRecord;
use crate::error::{Error, Result};
use crate::io::{write_feature_file, write_items_idx, FeatureMatrix};

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Fraction of items without an image (zero visual features).
    pub missing_image_frac: f32,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of a uniform-random jump instead of the planted
    /// nearest-neighbor step; the final transitions never jump so the
    /// held-out targets stay on-plant.
    pub jump_prob: f32,
    /// Time-conditioned plant: a short (same-session) gap leads to the
    /// nearest neighbor, a long (new-session) gap to the second-nearest,
    /// so the preceding gap predicts the successor. Random jumps are
    /// disabled in this mode.
    pub time_conditioned: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 100,
            feature_dim: 32,
            seed: 0,
            missing_image_frac: 0.2,
            min_len: 6,
            max_len: 12,
            jump_prob: 0.15,
            time_conditioned: false,
        }
    }
}

/// Transitions this close to the sequence end always follow the plant.
const PROTECTED_TAIL: usize = 3;

pub struct SynthCorpus {
    pub records: Vec<InteractionRecord>,
    pub item_ids: Vec<String>,
    pub features_v: FeatureMatrix,
    pub features_t: FeatureMatrix,
    /// nearest_neighbor[i] = planted successor of item row i (short gap).
    pub nearest_neighbor: Vec<usize>,
    /// second_nearest[i] = planted successor after a long gap.
    pub second_nearest: Vec<usize>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.users == 0 || cfg.items < 2 || cfg.feature_dim == 0 {
        return Err(Error::Contract {
            op: "synth::generate",
            msg: "need users >= 1, items >= 2, feature_dim >= 1".into(),
        });
    }
    if cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::Contract {
            op: "synth::generate",
            msg: format!("bad length range [{}, {}]", cfg.min_len, cfg.max_len),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.items;
    let dim = cfg.feature_dim;

    let mut feat_v: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let feat_t: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let presence: Vec<bool> = (0..n).map(|_| rng.gen::<f32>() >= cfg.missing_image_frac).collect();
    for (row, &present) in presence.iter().enumerate() {
        if !present {
            feat_v[row * dim..(row + 1) * dim].fill(0.0);
        }
    }

    // plant: successor = nearest neighbor in the concatenated feature space
    // (missing images already zeroed, matching the scoring convention)
    let dist = |a: usize, b: usize| -> f64 {
        let mut s = 0.0f64;
        for j in 0..dim {
            let dv = feat_v[a * dim + j] as f64 - feat_v[b * dim + j] as f64;
            let dt = feat_t[a * dim + j] as f64 - feat_t[b * dim + j] as f64;
            s += dv * dv + dt * dt;
        }
        s
    };
    let ranked_neighbors = |i: usize| -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist(i, a).partial_cmp(&dist(i, b)).unwrap());
        order
    };
    let mut nearest_neighbor = Vec::with_capacity(n);
    let mut second_nearest = Vec::with_capacity(n);
    for i in 0..n {
        let order = ranked_neighbors(i);
        nearest_neighbor.push(order[0]);
        second_nearest.push(order[1]);
    }

    let item_ids: Vec<String> = (0..n).map(|i| format!("i{i:05}")).collect();
    let mut records = Vec::new();
    for u in 0..cfg.users {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut item = rng.gen_range(0..n);
        let mut ts: i64 = rng.gen_range(1_000_000..2_000_000);
        let user_id = format!("u{u:05}");
        for step in 0..len {
            records.push(InteractionRecord {
                user_id: user_id.clone(),
                item_id: item_ids[item].clone(),
                timestamp: ts,
            });
            // session structure either way: short gaps continue a session,
            // long gaps open a new one days later
            let short_gap = rng.gen_range(1_800..14_400);
            let long_gap = rng.gen_range(172_800..864_000);
            if cfg.time_conditioned {
                let new_session = rng.gen::<f32>() < 0.4;
                item = if new_session { second_nearest[item] } else { nearest_neighbor[item] };
                ts += if new_session { long_gap } else { short_gap };
            } else {
                let protected = step + 1 + PROTECTED_TAIL >= len;
                let jump = !protected && rng.gen::<f32>() < cfg.jump_prob;
                item = if jump { rng.gen_range(0..n) } else { nearest_neighbor[item] };
                ts += if jump { long_gap } else { short_gap };
            }
        }
    }

    Ok(SynthCorpus {
        records,
        item_ids,
        features_v: FeatureMatrix { modality: 0, num_items: n, dim, data: feat_v, presence },
        features_t: FeatureMatrix {
            modality: 1,
            num_items: n,
            dim,
            data: feat_t,
            presence: vec![true; n],
        },
        nearest_neighbor,
        second_nearest,
    })
}

/// Generate and write interactions.tsv, items.idx, and both feature files.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<SynthCorpus> {
    let corpus = generate(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
    let mut tsv = String::new();
    for r in &corpus.records {
        tsv.push_str(&format!("{}\t{}\t{}\n", r.user_id, r.item_id, r.timestamp));
    }
    std::fs::write(dir.join("interactions.tsv"), tsv).map_err(|e| Error::io(dir.display(), e))?;
    write_items_idx(&dir.join("items.idx"), &corpus.item_ids)?;
    write_feature_file(&dir.join("features_v.bin"), &corpus.features_v)?;
    write_feature_file(&dir.join("features_t.bin"), &corpus.features_t)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { users: 10, items: 12, feature_dim: 4, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.features_v.data, b.features_v.data);
    }

    #[test]
    fn tail_transitions_follow_the_plant() {
        let cfg = SynthConfig {
            users: 20,
            items: 15,
            feature_dim: 4,
            jump_prob: 0.9,
            ..SynthConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        let row_of: BTreeMap<&str, usize> =
            corpus.item_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut per_user: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
        for r in &corpus.records {
            per_user.entry(&r.user_id).or_default().push(r);
        }
        for (_, rows) in per_user {
            let n = rows.len();
            // the final PROTECTED_TAIL transitions are nearest-neighbor steps
            for w in rows[n - PROTECTED_TAIL - 1..].windows(2) {
                let from = row_of[w[0].item_id.as_str()];
                let to = row_of[w[1].item_id.as_str()];
                assert_eq!(corpus.nearest_neighbor[from], to);
            }
        }
    }

    #[test]
    fn missing_images_have_zero_features() {
        let cfg = SynthConfig {
            users: 5,
            items: 30,
            feature_dim: 4,
            missing_image_frac: 0.5,
            ..SynthConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        let mut missing = 0;
        for row in 0..30 {
            if !corpus.features_v.presence[row] {
                missing += 1;
                assert!(corpus.features_v.data[row * 4..(row + 1) * 4].iter().all(|&v| v == 0.0));
            }
        }
        assert!(missing > 0);
    }

    #[test]
    fn time_conditioned_plant_follows_the_gap() {
        let cfg = SynthConfig {
            users: 25,
            items: 20,
            feature_dim: 4,
            time_conditioned: true,
            ..SynthConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        let row_of: BTreeMap<&str, usize> =
            corpus.item_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut per_user: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
        for r in &corpus.records {
            per_user.entry(&r.user_id).or_default().push(r);
        }
        let mut long_seen = 0;
        for (_, rows) in per_user {
            for w in rows.windows(2) {
                let from = row_of[w[0].item_id.as_str()];
                let to = row_of[w[1].item_id.as_str()];
                let gap = w[1].timestamp - w[0].timestamp;
                if gap >= 172_800 {
                    assert_eq!(corpus.second_nearest[from], to, "long gap must lead to 2nd-NN");
                    long_seen += 1;
                } else {
                    assert_eq!(corpus.nearest_neighbor[from], to, "short gap must lead to NN");
                }
            }
        }
        assert!(long_seen > 0);
    }

    #[test]
    fn timestamps_strictly_increase_per_user() {
        let cfg = SynthConfig { users: 8, items: 10, feature_dim: 3, ..SynthConfig::default() };
        let corpus = generate(&cfg).unwrap();
        let mut last: BTreeMap<&str, i64> = BTreeMap::new();
        for r in &corpus.records {
            if let Some(&prev) = last.get(r.user_id.as_str()) {
                assert!(r.timestamp > prev);
            }
            last.insert(&r.user_id, r.timestamp);
        }
    }
}
