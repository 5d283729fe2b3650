use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdc_refine::geom::{Mat3, RigidMotion, Rotation, Vec3};
use pdc_refine::io;
use pdc_refine::metrics::{self, EvalRecord};
use pdc_refine::model::ModelParams;
use pdc_refine::pipeline;
use pdc_refine::structure::{interface_residues, Complex, Group, DEFAULT_INTERFACE_CUTOFF};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdc-refine"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A three-structure synthetic dataset with a small, fast model config.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(structures: usize) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--out", s(&root), "--complexes", &structures.to_string(), "--mutations", "4", "--min-len", "8", "--max-len", "10", "--seed", "5"]);
        let config = serde_json::json!({
            "model": { "width": 26, "pool_width": 8, "knn": 6 },
            "train": { "k_recycles": 1, "l": 1, "r": 1, "lr": 0.002, "batch_size": 2, "max_iterations": 6, "validation_every": 3 },
            "data": { "dataset": "dataset.tsv", "structures": "structures", "n_folds": 3, "fold": 0 },
            "output": { "checkpoint": "model.json", "log": "train.jsonl" }
        });
        std::fs::write(root.join("small.json"), config.to_string()).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn train(&self, extra: &[&str]) -> String {
        let cfg = self.path("small.json");
        let mut args = vec!["train", "--config", s(&cfg)];
        args.extend_from_slice(extra);
        ok(&args)
    }

    fn first_entry(&self) -> io::DatasetEntry {
        io::parse_dataset(&std::fs::read_to_string(self.path("dataset.tsv")).unwrap()).unwrap().remove(0)
    }

    fn complex(&self, id: &str) -> Complex {
        let groups = BTreeMap::from([('A', Group::Ligand), ('B', Group::Receptor)]);
        io::parse_pdb(&std::fs::read_to_string(self.path(&format!("structures/{id}.pdb"))).unwrap(), &groups).unwrap().complex
    }
}

fn predicted(stdout: &str) -> f64 {
    stdout.split_whitespace().next().unwrap().parse().unwrap()
}

fn tsv_value(tsv: &str, key: &str) -> String {
    tsv.lines().find_map(|l| l.strip_prefix(&format!("{key}\t"))).unwrap_or_else(|| panic!("no {key} in\n{tsv}")).to_string()
}

#[test]
fn train_writes_a_loadable_checkpoint_and_reproducible_log() {
    let f = Fixture::new(3);
    let out = f.train(&["--seed", "4"]);
    assert!(out.contains("trained 6 iterations"), "{out}");
    let (params, meta) = ModelParams::load(&f.path("model.json")).unwrap();
    assert_eq!(params.config.width, 26);
    assert_eq!(meta["data"]["fold"], 0);
    assert_eq!(meta["train_config"]["seed"], 4);
    let log = std::fs::read_to_string(f.path("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["iteration", "loss_total", "loss_ddg", "loss_refine", "lr"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let again = f.path("again.jsonl");
    f.train(&["--seed", "4", "--out", s(&f.path("again.json")), "--log", s(&again)]);
    assert_eq!(std::fs::read_to_string(&again).unwrap(), log);
    let other = f.path("other.jsonl");
    f.train(&["--seed", "5", "--out", s(&f.path("other.json")), "--log", s(&other)]);
    assert_ne!(std::fs::read_to_string(&other).unwrap(), log);
}

#[test]
fn predict_is_reproducible_invariant_and_writes_a_parseable_pdb() {
    let f = Fixture::new(3);
    f.train(&[]);
    let e = f.first_entry();
    let pdb = f.path(&format!("structures/{}.pdb", e.pdb));
    let ckpt = f.path("model.json");
    let refined = f.path("refined.pdb");
    let muts = e.mutation_string();
    let args = |p: &Path| vec!["predict".to_string(), "--ckpt".into(), s(&ckpt).into(), "--pdb".into(), s(p).into(), "--ligand-chains".into(), "A".into(), "--receptor-chains".into(), "B".into(), "--mutations".into(), muts.clone()];
    let a: Vec<String> = args(&pdb).into_iter().chain(["--out-pdb".to_string(), s(&refined).to_string()]).collect();
    let a: Vec<&str> = a.iter().map(String::as_str).collect();
    let first = ok(&a);
    assert!(first.trim_end().ends_with("kcal/mol"));
    assert_eq!(ok(&a), first);

    // a quarter turn about z with an integer shift maps three-decimal PDB coordinates exactly
    let quarter = Rotation::from_matrix(Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
    let moved = f.complex(&e.pdb).transformed(&RigidMotion::new(quarter, Vec3::new(10.0, -5.0, 3.0)));
    let moved_path = f.path("moved.pdb");
    std::fs::write(&moved_path, io::serialize_pdb(&moved)).unwrap();
    let b = args(&moved_path);
    let b: Vec<&str> = b.iter().map(String::as_str).collect();
    assert!((predicted(&ok(&b)) - predicted(&first)).abs() < 1e-6);

    let groups = BTreeMap::from([('A', Group::Ligand), ('B', Group::Receptor)]);
    let back = io::parse_pdb(&std::fs::read_to_string(&refined).unwrap(), &groups).unwrap().complex;
    let wt = f.complex(&e.pdb);
    assert_eq!(back.len(), wt.len());
    let site = wt.find(&e.mutations[0].site()).unwrap();
    assert_eq!(back.residue(site).aa, e.mutations[0].mt);
}

#[test]
fn eval_matches_library_metrics_and_scores_perfect_labels() {
    let f = Fixture::new(3);
    f.train(&[]);
    let ckpt = f.path("model.json");
    let preds = f.path("preds.tsv");
    let tsv = ok(&["eval", "--ckpt", s(&ckpt), "--dataset", s(&f.path("dataset.tsv")), "--predictions", s(&preds)]);

    let rows: Vec<Vec<String>> = std::fs::read_to_string(&preds).unwrap().lines().skip(1).map(|l| l.split('\t').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 12);
    let records: Vec<EvalRecord> = rows.iter().map(|r| EvalRecord { structure: r[0].clone(), y_true: r[2].parse().unwrap(), y_pred: r[3].parse().unwrap() }).collect();
    let lib = metrics::evaluate(&records).unwrap();
    assert_eq!(tsv_value(&tsv, "pearson").parse::<f64>().unwrap(), lib.pearson);
    assert_eq!(tsv_value(&tsv, "minimized_rmse").parse::<f64>().unwrap(), lib.minimized_rmse);
    // four mutations per structure never reach the ten-record group threshold
    assert_eq!(tsv_value(&tsv, "per_structure_pearson"), "NA");

    // relabel every entry with the model's own prediction
    let mut entries = io::parse_dataset(&std::fs::read_to_string(f.path("dataset.tsv")).unwrap()).unwrap();
    for (e, r) in entries.iter_mut().zip(&rows) {
        e.ddg = r[3].parse().unwrap();
    }
    let perfect = f.path("perfect.tsv");
    std::fs::write(&perfect, io::write_dataset(&entries)).unwrap();
    let out = f.path("metrics.tsv");
    ok(&["eval", "--ckpt", s(&ckpt), "--dataset", s(&perfect), "--structures", s(&f.path("structures")), "--out", s(&out)]);
    let tsv = std::fs::read_to_string(&out).unwrap();
    assert!((tsv_value(&tsv, "pearson").parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
    assert!((tsv_value(&tsv, "spearman").parse::<f64>().unwrap() - 1.0).abs() < 1e-12);

    let fold = ok(&["eval", "--ckpt", s(&ckpt), "--dataset", s(&f.path("dataset.tsv")), "--fold", "0"]);
    assert_eq!(tsv_value(&fold, "n"), "4");
}

#[test]
fn per_structure_scores_appear_once_groups_reach_ten_records() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", s(dir.path()), "--complexes", "2", "--mutations", "10", "--min-len", "10", "--max-len", "12", "--seed", "2"]);
    let cfg = serde_json::json!({
        "model": { "width": 26, "pool_width": 8, "knn": 6 },
        "train": { "k_recycles": 1, "l": 1, "r": 1, "max_iterations": 1 },
        "data": { "dataset": "dataset.tsv", "structures": "structures", "n_folds": 2 },
        "output": { "checkpoint": "model.json" }
    });
    std::fs::write(dir.path().join("c.json"), cfg.to_string()).unwrap();
    ok(&["train", "--config", s(&dir.path().join("c.json"))]);
    let tsv = ok(&["eval", "--ckpt", s(&dir.path().join("model.json")), "--dataset", s(&dir.path().join("dataset.tsv"))]);
    assert_ne!(tsv_value(&tsv, "per_structure_pearson"), "NA");
    let groups = tsv.split("structure\tn\tpearson\tspearman\n").nth(1).unwrap();
    assert_eq!(groups.lines().count(), 2);
}

#[test]
fn check_passes_and_detects_an_injected_sign_flip() {
    let out = ok(&["check", "--quick"]);
    assert!(out.contains("all checks passed"));
    assert!(out.contains("paper-literal formula matches MC: false"), "{out}");
    let flipped = run(&["check", "--quick", "--suite", "psd", "--inject-sign-flip"]);
    assert_eq!(flipped.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&flipped.stdout).contains("psd Eq5"));
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    ok(&["check", "--quick", "--suite", "golden", "--json", s(&json)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["golden"]["pass"], true);
}

#[test]
fn correlate_uncertainty_reports_and_surfaces_constant_rmsf() {
    let f = Fixture::new(3);
    f.train(&[]);
    let e = f.first_entry();
    let pdb = f.path(&format!("structures/{}.pdb", e.pdb));
    let ckpt = f.path("model.json");
    let c = f.complex(&e.pdb);
    let (params, _) = ModelParams::load(&ckpt).unwrap();

    // RMSF column proportional to the model's own covariance norms
    let norms = pipeline::sigma_sq_norms(&params, &c).unwrap();
    let table: io::RmsfTable = c.residues().iter().zip(&norms).map(|(r, v)| ((r.chain_id, r.seq_number), 0.5 * v)).collect();
    let prop = f.path("prop.tsv");
    std::fs::write(&prop, io::write_rmsf(&table)).unwrap();
    let base = ["correlate-uncertainty", "--ckpt", s(&ckpt), "--pdb", s(&pdb), "--ligand-chains", "A", "--receptor-chains", "B", "--rmsf"];
    let out = ok(&[&base[..], &[s(&prop)]].concat());
    assert!((tsv_value(&out, "pearson").parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    let iface = interface_residues(&c, DEFAULT_INTERFACE_CUTOFF).len();
    assert_eq!(tsv_value(&out, "interface_residues").parse::<usize>().unwrap(), iface);
    assert_eq!(tsv_value(&out, "non_interface_residues").parse::<usize>().unwrap(), c.len() - iface);

    let flat: io::RmsfTable = c.residues().iter().map(|r| ((r.chain_id, r.seq_number), 1.0)).collect();
    let flat_path = f.path("flat.tsv");
    std::fs::write(&flat_path, io::write_rmsf(&flat)).unwrap();
    let res = run(&[&base[..], &[s(&flat_path)]].concat());
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("variance"));
}

#[test]
fn mask_init_changes_only_the_masked_window() {
    let f = Fixture::new(3);
    let e = f.first_entry();
    let pdb = f.path(&format!("structures/{}.pdb", e.pdb));
    let out = f.path("masked.pdb");
    let msg = ok(&["mask-init", "--pdb", s(&pdb), "--ligand-chains", "A", "--receptor-chains", "B", "--mutations", &e.mutation_string(), "--l", "1", "--r", "1", "--out", s(&out)]);
    assert!(msg.starts_with("masked "));
    let groups = BTreeMap::from([('A', Group::Ligand), ('B', Group::Receptor)]);
    let masked = io::parse_pdb(&std::fs::read_to_string(&out).unwrap(), &groups).unwrap().complex;
    let wt = f.complex(&e.pdb);
    let site = wt.find(&e.mutations[0].site()).unwrap();
    let changed: Vec<usize> = (0..wt.len()).filter(|&i| masked.residue(i).atoms != wt.residue(i).atoms).collect();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|&i| i.abs_diff(site) <= 1), "{changed:?} around {site}");
}

#[test]
fn pretrain_and_uncertainty_training_write_checkpoints() {
    let f = Fixture::new(3);
    let cfg = f.path("small.json");
    let pre = f.path("pre.json");
    let out = ok(&["pretrain", "--config", s(&cfg), "--out", s(&pre), "--max-iterations", "3"]);
    assert!(out.contains("pretrained the refiner for 3 iterations"), "{out}");
    let trained = f.path("from_pre.json");
    f.train(&["--init", s(&pre), "--out", s(&trained)]);
    ModelParams::load(&trained).unwrap();

    let e = f.first_entry();
    let unc = f.path("unc.json");
    let out = ok(&[
        "train-uncertainty",
        "--config",
        s(&cfg),
        "--pdb",
        s(&f.path(&format!("structures/{}.pdb", e.pdb))),
        "--rmsf",
        s(&f.path(&format!("rmsf/{}.tsv", e.pdb))),
        "--ligand-chains",
        "A",
        "--receptor-chains",
        "B",
        "--lr",
        "0.003",
        "--max-iterations",
        "40",
        "--out",
        s(&unc),
    ]);
    let nums: Vec<f64> = out.split_whitespace().filter_map(|w| w.parse().ok()).collect();
    assert!(nums[1] < nums[0], "{out}");
}

#[test]
fn exit_codes_distinguish_usage_data_and_check_failures() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["train"]), 1);
    assert_eq!(code(&["check", "--suite", "nonsense"]), 1);
    assert_eq!(code(&["--help"]), 0);

    let f = Fixture::new(3);
    let bad = f.path("bad.json");
    std::fs::write(&bad, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&bad)]), 1);
    std::fs::write(&bad, r#"{"train": {"k_recycles": 0}, "data": {"dataset": "dataset.tsv"}, "output": {"checkpoint": "m.json"}}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&bad)]), 1);
    assert_eq!(code(&["train", "--config", s(&f.path("small.json")), "--fold", "7"]), 1);
    assert_eq!(code(&["train", "--config", s(&f.path("missing.json"))]), 2);

    f.train(&[]);
    let pdb = f.path("structures/syn000.pdb");
    let model = f.path("model.json");
    let base = ["predict", "--ckpt", s(&model), "--pdb", s(&pdb), "--ligand-chains", "A", "--receptor-chains", "B", "--mutations"];
    assert_eq!(code(&[&base[..], &["XA1Q"]].concat()), 2);
    std::fs::write(f.path("garbage.json"), "{}").unwrap();
    assert_eq!(code(&["predict", "--ckpt", s(&f.path("garbage.json")), "--pdb", s(&pdb), "--ligand-chains", "A", "--receptor-chains", "B", "--mutations", "GA1W"]), 2);
}
