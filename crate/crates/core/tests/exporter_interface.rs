//! Files laid out the way an external activation exporter writes them:
//! an opaque-stage manifest and a `dumps.json` index over NPY files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repshare::metrics::AccuracyEstimator;
use repshare::npy::write_tensor;
use repshare::{
    enumerate_plans, forward_merged, load_manifest, memory_savings, read_dumps, select_plan,
    similarity_matrix, Error, InjectionPoint, SelectMode, SharingMode, Tensor,
};

const N: usize = 12;
const SHAPES: [[usize; 3]; 3] = [[8, 4, 4], [16, 2, 2], [10, 1, 1]];

fn write_manifest(dir: &Path, name: &str) {
    let stages: Vec<String> = SHAPES
        .iter()
        .enumerate()
        .map(|(id, s)| {
            let inputs = if id == 0 { "[]".to_string() } else { format!("[{}]", id - 1) };
            format!(
                r#"{{"id": {id}, "name": "block{id}", "kind": "opaque", "params": {{"params_count": {}}}, "inputs": {inputs}, "out_shape": [{}, {}, {}]}}"#,
                1000 * (id + 1),
                s[0],
                s[1],
                s[2]
            )
        })
        .collect();
    let text = format!(
        r#"{{"name": "{name}", "input_shape": [3, 8, 8], "output_stage": 2, "stages": [{}]}}"#,
        stages.join(", ")
    );
    std::fs::write(dir.join("manifest.json"), text).unwrap();
}

/// Index at `out/dumps.json`, arrays at `out/<model>/<id>.npy`.
fn write_export(out: &Path, model: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out.join(model)).unwrap();
    let mut entries = Vec::new();
    for (id, s) in SHAPES.iter().enumerate() {
        let numel = N * s.iter().product::<usize>();
        let data: Vec<f32> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![N, s[0], s[1], s[2]], data).unwrap();
        write_tensor(&t, out.join(model).join(format!("{id}.npy"))).unwrap();
        entries.push(format!(r#""{id}": "{model}/{id}.npy""#));
    }
    let index = format!(r#"{{"model": "{model}", "n": {N}, "stages": {{{}}}}}"#, entries.join(", "));
    std::fs::write(out.join("dumps.json"), index).unwrap();
}

#[test]
fn opaque_export_supports_similarity_and_planning() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), "net");
    let g = load_manifest(dir.path().join("manifest.json")).unwrap();
    assert_eq!(g.len(), 3);
    assert_eq!(memory_savings(&g, 1).unwrap(), 4 * 3000);

    let first = dir.path().join("first");
    let second = dir.path().join("second");
    write_export(&first, "net", 5);
    write_export(&second, "net", 5);
    let a = read_dumps(first.join("dumps.json")).unwrap();
    let b = read_dumps(&second).unwrap();

    // Same model exported twice: every same-stage similarity is 1.
    let same = similarity_matrix(&a, &b, SharingMode::Same).unwrap();
    for id in 0..3 {
        assert!((same.get(id, id).unwrap() - 1.0).abs() < 1e-9);
    }

    let cross = similarity_matrix(&a, &b, SharingMode::Cross).unwrap();
    let est = AccuracyEstimator { threshold: 0.4, floor_value: 0.031, slope: 1.0, intercept: 0.0 };
    let plans = enumerate_plans(&g, &a, &g, &cross, &est).unwrap();
    assert_eq!(plans.len(), 9);
    assert!(plans.iter().all(|p| p.valid));
    let best = select_plan(&plans, SelectMode::MaxSavings { min_similarity: 0.99 }).unwrap();
    assert_eq!((best.donor_stage, best.target_stage), (2, 2));
}

#[test]
fn opaque_stages_cannot_be_executed() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), "net");
    write_export(dir.path(), "net", 1);
    let g = load_manifest(dir.path().join("manifest.json")).unwrap();
    let dumps = read_dumps(dir.path()).unwrap();
    let inj = InjectionPoint::new(&g, 0, dumps.get(0).unwrap().clone()).unwrap();
    let err = forward_merged(&g, &inj).unwrap_err();
    assert!(matches!(err, Error::NotExecutable { stage: 1, .. }), "{err}");
}
