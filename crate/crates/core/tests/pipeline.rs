use std::collections::BTreeSet;

use proptest::prelude::*;

use bevtraj::ingest::{read_recording, write_recording};
use bevtraj::model::{loss, window_stacks, ModelParams};
use bevtraj::synth::{generate_scene, SceneSpec};
use bevtraj::window::{assign_splits, extract_all, load_split, save_windows, split_dataset, SplitTag, DEFAULT_STRIDE};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    // Scene -> CSV on disk -> windows: futures still follow the closed-form motion.
    #[test]
    fn recorded_scene_windows_follow_motion(seed in 0u64..10_000) {
        let scene = generate_scene(&SceneSpec { seed, n_vehicles: 5, ..SceneSpec::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_recording(dir.path(), &scene.tracks, &scene.meta).unwrap();
        let (tracks, meta) = read_recording(dir.path()).unwrap();
        let windows = extract_all(&tracks, &meta, DEFAULT_STRIDE).unwrap();
        prop_assert!(!windows.is_empty());
        for w in &windows {
            prop_assert_eq!(w.history.len(), 19);
            prop_assert_eq!(w.future.len(), 31);
            let oracle = scene.oracle_future(w.tv_id, w.t).unwrap();
            for (a, b) in w.future.iter().zip(&oracle) {
                prop_assert!((a.0 - b.0).abs() < 1e-3 && (a.1 - b.1).abs() < 1e-3, "{:?} vs {:?}", a, b);
            }
        }
    }
}

proptest! {
    #[test]
    fn split_sizes_track_ratios(n in 5usize..2000, seed in any::<u64>()) {
        let ids: BTreeSet<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
        let tags = assign_splits(&ids, seed).unwrap();
        let count = |s| tags.values().filter(|&&t| t == s).count();
        let (train, test, eval) = (count(SplitTag::Train), count(SplitTag::Test), count(SplitTag::Eval));
        prop_assert_eq!(train + test + eval, n);
        prop_assert!((train as f64 - 0.6 * n as f64).abs() <= 1.0);
        prop_assert!((test as f64 - 0.2 * n as f64).abs() <= 1.0);
        prop_assert_eq!(&tags, &assign_splits(&ids, seed).unwrap());
    }
}

#[test]
fn stored_windows_give_the_same_loss() {
    let scene = generate_scene(&SceneSpec { seed: 11, ..SceneSpec::default() }).unwrap();
    let windows = split_dataset(extract_all(&scene.tracks, &scene.meta, DEFAULT_STRIDE).unwrap(), 4).unwrap();
    let root = tempfile::tempdir().unwrap();
    save_windows(root.path(), &windows).unwrap();
    let params = ModelParams::new(8, 0.1);
    let mut reloaded = 0;
    for split in SplitTag::ALL {
        for w in load_split(root.path(), split).unwrap() {
            let original = windows.iter().find(|o| o.tv_id == w.tv_id && o.t == w.t).unwrap();
            assert_eq!(original.split, Some(split));
            let a = loss(&params, &window_stacks(original).unwrap(), &original.future).unwrap();
            let b = loss(&params, &window_stacks(&w).unwrap(), &w.future).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            reloaded += 1;
        }
    }
    assert_eq!(reloaded, windows.len());
}
