use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cvf_core::engine;
use cvf_core::eval;
use cvf_core::model::ToyModel;
use cvf_core::ncu;
use cvf_core::world::World;
use tempfile::TempDir;

fn cvf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvf")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cvf(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A world and its vanilla checkpoint, shared by every test.
fn fixture() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        ok(dir.path(), &["gen-world", "--out", "w.nsuw", "--seed", "0"]);
        ok(dir.path(), &["train", "--world", "w.nsuw", "--out", "v.nsuc", "--seed", "0"]);
        dir
    })
    .path()
}

/// Fresh directory holding copies of the fixture inputs.
fn workdir() -> TempDir {
    let dir = TempDir::new().unwrap();
    for f in ["w.nsuw", "v.nsuc"] {
        std::fs::copy(fixture().join(f), dir.path().join(f)).unwrap();
    }
    dir
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn load_inputs(dir: &Path) -> (World, ToyModel) {
    (
        World::from_bytes(&read(dir.join("w.nsuw"))).unwrap(),
        ToyModel::from_bytes(&read(dir.join("v.nsuc"))).unwrap(),
    )
}

#[test]
fn gen_world_magic_determinism_and_json_mirror() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["gen-world", "--out", "a.nsuw", "--seed", "4", "--dump-json"]);
    ok(d.path(), &["gen-world", "--out", "b.nsuw", "--seed", "4"]);
    let a = read(d.path().join("a.nsuw"));
    assert_eq!(&a[..4], b"NSUW");
    assert_eq!(a, read(d.path().join("b.nsuw")));
    let mirror: World = serde_json::from_slice(&read(d.path().join("a.nsuw.json"))).unwrap();
    assert_eq!(mirror, World::from_bytes(&a).unwrap());
    assert!(d.path().join("a.nsuw.manifest.json").exists());
}

#[test]
fn bad_config_exits_2() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("bad.cfg"), "n_entities = many\n").unwrap();
    let out = cvf(d.path(), &["gen-world", "--config", "bad.cfg", "--out", "w.nsuw"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.path().join("bad.cfg"), "forget_fraction = 1.5\n").unwrap();
    assert_eq!(cvf(d.path(), &["gen-world", "--config", "bad.cfg", "--out", "w.nsuw"]).status.code(), Some(2));
}

#[test]
fn unmet_memorization_exits_3() {
    let d = workdir();
    std::fs::write(d.path().join("t.cfg"), "epochs = 0\n").unwrap();
    let out = cvf(d.path(), &["train", "--world", "w.nsuw", "--config", "t.cfg", "--out", "x.nsuc"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.path().join("x.nsuc.failed.json").exists());
    assert!(!d.path().join("x.nsuc").exists());
}

#[test]
fn non_finite_loss_exits_4_with_dump() {
    let d = workdir();
    let out = cvf(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "nmse", "--lr", "1e308", "--out", "n.nsuc"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n.nsuc.nan.json"));
    let dump: serde_json::Value = serde_json::from_slice(&read(d.path().join("n.nsuc.nan.json"))).unwrap();
    assert!(dump["step"].is_u64());
}

#[test]
fn unlearn_emits_artifacts_and_before_equals_adapters_off_after() {
    let d = workdir();
    ok(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "cvf-ncu", "--out", "u.nsuc"]);
    for s in ["", ".record.json", ".before.json", ".after.json", ".manifest.json"] {
        assert!(d.path().join(format!("u.nsuc{s}")).exists(), "missing u.nsuc{s}");
    }
    let (world, _) = load_inputs(d.path());
    let model = ToyModel::from_bytes(&read(d.path().join("u.nsuc"))).unwrap();
    let off = eval::eval_suite_with(&model, &world, false).unwrap();
    assert_eq!(String::from_utf8(read(d.path().join("u.nsuc.before.json"))).unwrap(), off.to_json());
}

#[test]
fn ga_leaves_qa_bit_equal() {
    let d = workdir();
    ok(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "ga", "--out", "g.nsuc"]);
    let parse = |f: &str| -> serde_json::Value { serde_json::from_slice(&read(d.path().join(f))).unwrap() };
    let (before, after) = (parse("g.nsuc.before.json"), parse("g.nsuc.after.json"));
    for key in ["forget_qa", "retain_qa", "rw_qa"] {
        assert_eq!(before[key], after[key], "{key}");
    }
}

#[test]
fn ncu_init_report_matches_recomputation() {
    let d = workdir();
    ok(d.path(), &["ncu-init", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--r", "4", "--out", "b.nsub"]);
    ok(d.path(), &["ncu-init", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--r", "4", "--out", "c.nsub"]);
    let bytes = read(d.path().join("b.nsub"));
    assert_eq!(&bytes[..4], b"NSUB");
    assert_eq!(bytes, read(d.path().join("c.nsub")));

    let (world, vanilla) = load_inputs(d.path());
    let (dump, basis) = engine::build_ncu_basis(&vanilla, &world, 4, 0).unwrap();
    assert_eq!(ncu::NullSpaceBasis::from_bytes(&bytes).unwrap(), basis);
    let mut m = vanilla.clone();
    ncu::init_lora_ncu(&mut m, &basis).unwrap();
    let fresh = ncu::verify_nullspace(&m, &dump).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&read(d.path().join("b.nsub.verify.json"))).unwrap();
    let layers: Vec<ncu::LayerResidual> = serde_json::from_value(report["layers"].clone()).unwrap();
    assert_eq!(layers, fresh);
}

#[test]
fn ncu_init_rank_out_of_range_exits_2() {
    let d = workdir();
    for r in ["0", "32"] {
        let out = cvf(d.path(), &["ncu-init", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--r", r, "--out", "b.nsub"]);
        assert_eq!(out.status.code(), Some(2), "r = {r}");
    }
}

#[test]
fn precomputed_basis_gives_the_inline_result() {
    let d = workdir();
    ok(d.path(), &["ncu-init", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--r", "8", "--out", "b.nsub"]);
    ok(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "cvf-ncu", "--out", "a.nsuc"]);
    ok(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "cvf-ncu", "--basis", "b.nsub", "--out", "b.nsuc"]);
    assert_eq!(read(d.path().join("a.nsuc")), read(d.path().join("b.nsuc")));
    let out = cvf(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "cvf-ncu", "--basis", "b.nsub", "--r", "4", "--out", "c.nsuc"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inputs_are_never_overwritten() {
    let d = workdir();
    let before = read(d.path().join("v.nsuc"));
    let out = cvf(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "cvf-ncu", "--out", "v.nsuc"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(read(d.path().join("v.nsuc")), before);
}

#[test]
fn single_task_continual_equals_static_unlearning() {
    let d = workdir();
    ok(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "cvf-ncu", "--out", "u.nsuc"]);
    ok(d.path(), &["continual", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--tasks", "1", "--out", "c"]);
    assert_eq!(read(d.path().join("c/stage_1.nsuc")), read(d.path().join("u.nsuc")));
}

#[test]
fn continual_outputs_one_stage_per_task_and_triangular_heatmap() {
    let d = workdir();
    ok(d.path(), &["continual", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--tasks", "3", "--epochs", "5", "--out", "c"]);
    let stages = (1..=4).filter(|s| d.path().join(format!("c/stage_{s}.nsuc")).exists()).count();
    assert_eq!(stages, 3);
    let heatmap = eval::parse_heatmap_csv(&String::from_utf8(read(d.path().join("c/heatmap.csv"))).unwrap()).unwrap();
    for s in 0..3 {
        for t in 0..3 {
            assert_eq!(heatmap.get(s, t).is_some(), t <= s, "cell ({s}, {t})");
        }
    }
    let curves = String::from_utf8(read(d.path().join("c/curves.csv"))).unwrap();
    assert_eq!(curves.lines().count(), 4);
}

#[test]
fn sweep_rows_dedup_and_single_run_oracle() {
    let d = workdir();
    let grid = "alpha=0,15,30;beta=0.5,1,1.0";
    let out = ok(d.path(), &["sweep", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--grid", grid, "--epochs", "5", "--out", "s.csv"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    let csv = String::from_utf8(read(d.path().join("s.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);

    ok(d.path(), &["unlearn", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--method", "cvf-ncu", "--alpha", "15", "--beta", "0.5", "--epochs", "5", "--out", "one.nsuc"]);
    let after: serde_json::Value = serde_json::from_slice(&read(d.path().join("one.nsuc.after.json"))).unwrap();
    let row: Vec<&str> = rows[2].split(',').collect();
    assert_eq!(row[0].parse::<f64>().unwrap(), 15.0);
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.5);
    for (i, key) in ["forget_vqa", "forget_qa", "retain_vqa", "retain_qa", "rw_vqa", "rw_qa"].iter().enumerate() {
        assert_eq!(row[3 + i].parse::<f64>().unwrap(), after[key].as_f64().unwrap(), "{key}");
    }
}

#[test]
fn sweep_results_do_not_depend_on_jobs() {
    let d = workdir();
    let base = ["sweep", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--grid", "alpha=10,20,30", "--epochs", "3"];
    ok(d.path(), &[&base[..], &["--jobs", "1", "--out", "a.csv"]].concat());
    ok(d.path(), &[&base[..], &["--jobs", "3", "--out", "b.csv"]].concat());
    assert_eq!(read(d.path().join("a.csv")), read(d.path().join("b.csv")));
}

#[test]
fn malformed_grid_exits_2() {
    let d = workdir();
    let out = cvf(d.path(), &["sweep", "--ckpt", "v.nsuc", "--world", "w.nsuw", "--grid", "alpha=1;;beta", "--out", "s.csv"]);
    assert_eq!(out.status.code(), Some(2));
}
