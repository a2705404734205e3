use std::sync::Arc;

use gwwalk_core::lab::{self, SpeedParams, TrapParams};
use gwwalk_core::walk::{excursion_decomposition, project_backbone, regenerations, run_walk, WalkOptions};
use gwwalk_core::{derive_seed, DerivedLaws, OffspringLaw, TreeHandle};

fn binary() -> Arc<DerivedLaws> {
    Arc::new(DerivedLaws::new(&OffspringLaw::new([(0, 0.25), (2, 0.75)]).unwrap()).unwrap())
}

#[test]
fn regeneration_blocks_occupy_disjoint_subtrees() {
    let laws = binary();
    for i in 0..5 {
        let tree = TreeHandle::new(derive_seed(11, "tree", i), laws.clone());
        let traj = run_walk(&tree, 1.0, 20_000, derive_seed(11, "walk", i), WalkOptions { record_moves: true });
        let vertices = traj.vertices().unwrap();
        let rec = regenerations(&traj).unwrap();
        assert!(rec.zeta_x.len() > 10);
        for &t in &rec.zeta_x {
            let v = &vertices[t];
            assert!(tree.expand(v).unwrap().is_backbone);
            assert!(vertices[..t].iter().all(|u| !u.descends_from(v)), "subtree of {v} visited before time {t}");
            assert!(vertices[t..].iter().all(|u| u.descends_from(v)), "walk left the subtree of {v} after time {t}");
        }
    }
}

#[test]
fn excursion_identity_holds_on_simulated_walks() {
    let laws = binary();
    for i in 0..100 {
        let tree = TreeHandle::new(derive_seed(12, "tree", i), laws.clone());
        let traj = run_walk(&tree, 1.3, 2000, derive_seed(12, "walk", i), WalkOptions::default());
        let trace = project_backbone(&traj).unwrap();
        for k in 0..trace.r.len() - 1 {
            let gammas = excursion_decomposition(&traj, &trace, k).unwrap();
            assert_eq!(1 + gammas.iter().sum::<usize>(), trace.r[k + 1] - trace.r[k]);
        }
        assert!(excursion_decomposition(&traj, &trace, trace.r.len() - 1).is_err());
    }
}

#[test]
fn backbone_walk_is_a_nearest_neighbour_path_on_the_backbone() {
    let laws = binary();
    for i in 0..20 {
        let tree = TreeHandle::new(derive_seed(13, "tree", i), laws.clone());
        let traj = run_walk(&tree, 0.9, 5000, derive_seed(13, "walk", i), WalkOptions::default());
        let trace = project_backbone(&traj).unwrap();
        assert_eq!(trace.r[0], 0);
        assert!(trace.r.windows(2).all(|w| w[0] < w[1]));
        assert!(trace.levels.windows(2).all(|w| w[0].abs_diff(w[1]) == 1));
        for &t in &trace.r[1..] {
            assert!(traj.on_backbone[t] && traj.on_backbone[t - 1]);
        }
    }
}

#[test]
fn depth_three_shapes_match_the_exact_oracle() {
    let c = lab::compare_shapes(&binary(), 3, 100_000, 14).unwrap();
    assert!(c.exact_oracle.p_value > 0.01, "{:?}", c.exact_oracle);
    let shallow = lab::compare_shapes(&binary(), 2, 1000, 14).unwrap();
    assert!(c.counts.len() > shallow.counts.len());
}

#[test]
fn decomposition_matches_the_oracle_for_a_law_with_single_children() {
    let law = OffspringLaw::new([(0, 0.2), (1, 0.3), (3, 0.5)]).unwrap();
    let laws = Arc::new(DerivedLaws::new(&law).unwrap());
    let c = lab::compare_shapes(&laws, 2, 100_000, 15).unwrap();
    assert!(c.exact_oracle.p_value > 0.01, "{:?}", c.exact_oracle);
}

#[test]
fn outputs_do_not_depend_on_the_thread_count() {
    let laws = binary();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let speed = lab::speed(
                &laws,
                &[1.0, 1.6],
                SpeedParams {
                    steps: 20_000,
                    walks: 6,
                    iid_blocks: 200,
                },
                16,
            )
            .unwrap();
            let traps = lab::trap_moments_experiment(
                &laws,
                &[1.2],
                TrapParams {
                    samples: 20_000,
                    ..Default::default()
                },
                16,
            )
            .unwrap();
            speed
                .tables
                .iter()
                .chain(&traps.tables)
                .map(|(name, t)| format!("{name}\n{}", t.to_csv()))
                .collect::<String>()
        })
    };
    assert_eq!(run(1), run(4));
}
