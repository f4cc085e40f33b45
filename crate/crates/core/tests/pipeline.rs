use std::fs;
use std::path::Path;

use gmvo::formats;
use gmvo::graph::build_edges;
use gmvo::pipeline::{ingest, run_manifest, RunManifest, SWEEP_FILE};
use gmvo::synth::{self, gen_synth, generate, SyntheticSpec};
use gmvo::Matrix;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        embedding_dim: 16,
        ..SyntheticSpec::default()
    }
}

fn quick_manifest(dir: &Path) -> RunManifest {
    let path = gen_synth(&small_spec(), dir).unwrap();
    let mut m = RunManifest::load(&path).unwrap();
    m.config.epochs = 3;
    m.config.output_dim = 8;
    m.lambdas.truncate(2);
    m
}

#[test]
fn default_spec_shape_and_signal_signs() {
    let spec = SyntheticSpec::default();
    let data = generate(&spec).unwrap();
    assert_eq!(data.items.len(), 40);
    assert_eq!(data.embeddings.shape(), (40, 512));
    for (u, v, c) in data.interactions.iter() {
        let (a, b) = (
            data.clusters[u.as_str()[4..].parse::<usize>().unwrap()],
            data.clusters[v.as_str()[4..].parse::<usize>().unwrap()],
        );
        if a != b {
            assert!(c.signal() < 0, "{u} {v} {c:?}");
        }
    }
}

#[test]
fn separation_on_default_spec() {
    let data = generate(&SyntheticSpec::default()).unwrap();
    let catalog = gmvo::ItemCatalog::new(data.items.clone(), data.embeddings.clone()).unwrap();
    let graph = build_edges(&data.interactions, &catalog, 0.0).unwrap();
    let mut within = 0;
    let mut connected = 0;
    for u in 0..40 {
        for v in u + 1..40 {
            let same = data.clusters[u] == data.clusters[v];
            if same {
                within += 1;
                connected += usize::from(graph.has_edge(u, v));
            } else {
                assert!(!graph.has_edge(u, v));
            }
        }
    }
    assert!(connected as f64 >= 0.95 * within as f64, "{connected}/{within}");
}

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_synth(&small_spec(), a.path()).unwrap();
    gen_synth(&small_spec(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for name in names {
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    gen_synth(&SyntheticSpec { seed: 1, ..small_spec() }, c.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join(synth::EMBEDDINGS_FILE)).unwrap(),
        fs::read(c.path().join(synth::EMBEDDINGS_FILE)).unwrap()
    );
}

#[test]
fn ingest_accepts_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = RunManifest::load(&gen_synth(&small_spec(), dir.path()).unwrap()).unwrap();
    let data = ingest(&m).unwrap();
    assert_eq!(data.catalog.len(), 40);
    assert_eq!(data.candidate_sets.len(), 40);
}

#[test]
fn ingest_reports_row_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = dir.path().join("catalog.csv");
    fs::write(&catalog, "item_id,price\na,1\nb,2\nc,3\n").unwrap();
    let ok = dir.path().join("ok.bin");
    formats::write_embeddings(&ok, &Matrix::zeros(3, 512)).unwrap();
    assert_eq!(formats::load_catalog(&catalog, &ok, 0).unwrap().len(), 3);
    let bad = dir.path().join("bad.bin");
    formats::write_embeddings(&bad, &Matrix::zeros(4, 512)).unwrap();
    let err = formats::load_catalog(&catalog, &bad, 0).unwrap_err();
    assert!(err.to_string().contains("row count mismatch"), "{err}");
}

#[test]
fn ingest_names_the_line_of_an_unknown_id() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen_synth(&small_spec(), dir.path()).unwrap();
    let interactions = dir.path().join(synth::INTERACTIONS_FILE);
    let mut text = fs::read_to_string(&interactions).unwrap();
    let lines = text.lines().count();
    text.push_str("item00000,ghost,1,0,0,0\n");
    fs::write(&interactions, text).unwrap();
    let err = ingest(&RunManifest::load(&path).unwrap()).unwrap_err().to_string();
    assert!(err.contains(&format!(":{}:", lines + 1)), "{err}");
    assert!(err.contains("ghost"), "{err}");
}

#[test]
fn manifest_rejects_missing_files_and_bad_versions() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen_synth(&small_spec(), dir.path()).unwrap();
    fs::remove_file(dir.path().join(synth::LABELS_FILE)).unwrap();
    assert!(RunManifest::load(&path).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = gen_synth(&small_spec(), dir.path()).unwrap();
    let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 7");
    fs::write(&path, text).unwrap();
    assert!(RunManifest::load(&path).is_err());
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&small_spec()).unwrap();
    let m = RunManifest::load(&synth::write_synthetic(&data, dir.path()).unwrap()).unwrap();
    let back = ingest(&m).unwrap();
    assert_eq!(formats::read_embeddings(&m.embeddings).unwrap(), data.embeddings);
    let prices: Vec<(_, _)> = back.catalog.items().iter().map(|it| (it.id.clone(), it.raw_price)).collect();
    assert_eq!(prices, data.items);
    assert_eq!(back.interactions.len(), data.interactions.len());
    for (u, v, c) in data.interactions.iter() {
        assert_eq!(back.interactions.get(u, v), Some(*c));
    }
    assert_eq!(back.candidate_sets, data.candidate_sets);
    assert_eq!(back.transactions.rows(), data.transactions.rows());
    assert_eq!(
        back.labels.rows().collect::<Vec<_>>(),
        data.labels.rows().collect::<Vec<_>>()
    );
}

#[test]
fn sweep_is_deterministic() {
    let read_all = |out: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| !p.to_string_lossy().ends_with(".log.csv"))
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = quick_manifest(a.path());
    let mb = quick_manifest(b.path());
    let runs = run_manifest(&ma).unwrap();
    run_manifest(&mb).unwrap();
    assert_eq!(runs.len(), 2);
    let fa = read_all(&ma.out_dir);
    let fb = read_all(&mb.out_dir);
    assert_eq!(fa.len(), 2 * 2 + 2);
    assert_eq!(fa, fb);
    let sweep = fs::read_to_string(ma.out_dir.join(SWEEP_FILE)).unwrap();
    assert!(sweep.starts_with("lambda,ndcg_at_k,egmv_at_k"));
    assert_eq!(sweep.lines().count(), 3);
}
