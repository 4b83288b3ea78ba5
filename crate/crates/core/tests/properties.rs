use std::collections::BTreeSet;

use fastgsc::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use fastgsc::diffusion::{combine_cfg, combine_scd, ddim_update, predict_x0};
use fastgsc::nn::Activation;
use fastgsc::semunits::{TableConfig, TaskRequest, UnitTable};
use fastgsc::timeline::{conventional_timeline, pgsc_timeline, LatencyConfig, PhaseDispatch};
use fastgsc::toyworld::{score_ids, WorldConfig, WorldSpec};
use fastgsc::tpe::{action_mask, masked_policy_distribution, EnvConfig, Episode, JointAction};
use proptest::prelude::*;

fn table() -> UnitTable {
    UnitTable::generate(1, &TableConfig::default()).unwrap()
}

fn dispatches(counts: &[usize]) -> Vec<PhaseDispatch> {
    let mut next = 0;
    counts
        .iter()
        .map(|&c| {
            next += c;
            PhaseDispatch::new((next - c..next).collect())
        })
        .collect()
}

/// Phase sizes with a non-empty first phase, at most six phases and eight units.
fn phase_counts() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=8, prop::collection::vec(0usize..=8, 0..6)).prop_map(|(first, rest)| {
        let mut v = vec![first];
        let mut left = 8 - first;
        for r in rest {
            let n = r.min(left);
            v.push(n);
            left -= n;
        }
        v
    })
}

proptest! {
    #[test]
    fn masked_distribution_is_a_distribution_on_the_mask(
        logits in prop::collection::vec(-30.0f64..30.0, 16),
        mask_bits in 1u32..(1 << 16),
    ) {
        let mask: Vec<bool> = (0..16).map(|i| mask_bits >> i & 1 == 1).collect();
        let p = masked_policy_distribution(&logits, &mask).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (pi, m) in p.iter().zip(&mask) {
            prop_assert!(*pi >= 0.0);
            if !m {
                prop_assert_eq!(*pi, 0.0);
            }
        }
    }

    #[test]
    fn parallel_residual_never_exceeds_conventional(counts in phase_counts(), tau_e in 0.5f64..10.0) {
        let cfg = LatencyConfig { tau_e, ..Default::default() };
        let total: usize = counts.iter().sum();
        let (p, s) = pgsc_timeline(&dispatches(&counts), &cfg).unwrap();
        let (c, _) = conventional_timeline(total, &cfg).unwrap();
        prop_assert!(p.residual_latency <= c.residual_latency + 1e-12);
        let all_up_front = counts[1..].iter().all(|&n| n == 0);
        prop_assert_eq!(p.residual_latency == c.residual_latency, all_up_front);
        prop_assert_eq!(s.delivered().len() + s.dropped.len(), total);
    }

    #[test]
    fn phases_within_the_slack_cost_only_the_first(first in 1usize..=4, later in prop::collection::vec(0usize..=2, 0..5)) {
        let cfg = LatencyConfig::default();
        let (r, s) = pgsc_timeline(&dispatches(&[vec![first], later].concat()), &cfg).unwrap();
        prop_assert_eq!(r.residual_latency, cfg.tau_e * first as f64);
        prop_assert!(s.dropped.is_empty());
    }

    #[test]
    fn score_is_bounded(seed in any::<u64>(), ids in prop::collection::btree_set(0usize..8, 1..=8)) {
        let w = WorldSpec::generate(seed % 64, &WorldConfig::default()).unwrap();
        let ids: Vec<usize> = ids.into_iter().collect();
        let x = w.sample_clean(&ids.iter().copied().collect(), &mut w.rng(seed));
        let s = score_ids(&w.table, &x, &ids).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn guidance_identities(
        a in prop::collection::vec(-5.0f64..5.0, 8),
        b in prop::collection::vec(-5.0f64..5.0, 8),
        c in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        prop_assert_eq!(combine_cfg(&a, &b, 0.0), a.clone());
        prop_assert_eq!(combine_scd(&a, &b, &c, 0.0), a.clone());
        // equal new and previous predictions cancel for any α
        let s = combine_scd(&a, &b, &b, 7.0);
        prop_assert!(s.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn ddim_at_alpha_bar_one_returns_the_clean_estimate(
        x in prop::collection::vec(-5.0f64..5.0, 6),
        e in prop::collection::vec(-3.0f64..3.0, 6),
        ab in 0.01f64..0.99,
    ) {
        let to_clean = ddim_update(&x, &e, ab, 1.0);
        let x0 = predict_x0(&x, &e, ab);
        prop_assert!(to_clean.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn checkpoints_round_trip(params in prop::collection::vec(-1e6f32..1e6, 0..200), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let h = CheckpointHeader {
            format_version: 1,
            kind: "policy".into(),
            layers: vec![params.len(), 1],
            activation: Activation::Tanh,
            n_params: params.len(),
            seed,
            extra: serde_json::json!({ "note": "x" }),
        };
        let p: Vec<f64> = params.iter().map(|&v| v as f64).collect();
        write_checkpoint(&path, &h, &p).unwrap();
        let (h2, p2) = read_checkpoint(&path).unwrap();
        prop_assert_eq!(h2, h);
        prop_assert_eq!(p2, p);
    }

    #[test]
    fn valid_play_ends_with_every_unit_accounted_for(ids in prop::collection::btree_set(0usize..8, 1..=8), choices in prop::collection::vec(any::<u32>(), 8)) {
        let t = table();
        let ids: Vec<usize> = ids.into_iter().collect();
        let env = EnvConfig::default();
        let mut ep = Episode::new(TaskRequest::from_ids(&t, &ids).unwrap(), &env, true);
        let mut steps = 0;
        while !ep.done {
            let mask = action_mask(&ep.state()).unwrap();
            let valid: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
            let r = ep.step(JointAction { index: valid[choices[steps] as usize % valid.len()] }).unwrap();
            prop_assert!(r.reward <= 0.0);
            steps += 1;
        }
        prop_assert!(steps <= env.latency.phases());
        let o = ep.outcome().unwrap();
        let s = o.schedule.unwrap();
        let delivered = s.delivered();
        let discarded: BTreeSet<usize> = ep.discarded().into_iter().collect();
        prop_assert!(delivered.is_disjoint(&discarded));
        prop_assert_eq!(delivered.len() + discarded.len(), ids.len());
        prop_assert!(o.report.residual_latency >= env.latency.tau_e);
    }

    #[test]
    fn joint_action_bits_round_trip(index in 0usize..256) {
        let a = JointAction { index };
        prop_assert_eq!(JointAction::from_bits(&a.bits(8)), a);
        prop_assert_eq!(a.count(), index.count_ones() as usize);
    }
}
