use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grove_core::dataio::{
    read_embeddings, save_checkpoint, write_embeddings, write_manifest, PairRecord, Split,
};
use grove_core::gplvm::{init_model, Modality, TrainConfig};
use grove_core::inference::{batch_embed, LatentFitConfig};
use grove_core::metrics::{DiagGaussian, Distance};
use grove_core::numerics::Matrix;
use grove_core::synthetic::{generate, SyntheticConfig};
use serde_json::Value;
use tempfile::TempDir;

fn grove(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_grove"));
    cmd.args(args).env("RUST_LOG", "info");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(stdout.lines().count(), 1, "stdout must be one JSON line: {stdout:?}");
    serde_json::from_str(&stdout).expect("stdout parses as JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    /// 24 synthetic pairs (D=4): 18 train and 6 test, one caption per image,
    /// plus a 5-epoch config.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&SyntheticConfig {
            n_pairs: 24,
            d: 4,
            seed: 11,
            ..SyntheticConfig::default()
        });
        write_embeddings(&data.pairs.image, &dir.path().join("img.grve")).unwrap();
        write_embeddings(&data.pairs.text, &dir.path().join("txt.grve")).unwrap();
        let records: Vec<PairRecord> = (0..24)
            .map(|i| PairRecord {
                pair_id: format!("p{i}"),
                image_row: i,
                text_row: i,
                group_id: format!("g{i}"),
                split: if i < 18 { Split::Train } else { Split::Test },
            })
            .collect();
        write_manifest(&records, &dir.path().join("pairs.tsv")).unwrap();
        fs::write(
            dir.path().join("train.cfg"),
            "epochs = 5\nbatch_size = 6\nq_dim = 2\nm_inducing = 8\nlearning_rate = 0.01\nlambda2 = 1\n",
        )
        .unwrap();
        Toy { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self) -> Output {
        grove(
            &[
                "train",
                "--images",
                s(&self.path("img.grve")),
                "--texts",
                s(&self.path("txt.grve")),
                "--manifest",
                s(&self.path("pairs.tsv")),
                "--config",
                s(&self.path("train.cfg")),
                "--out",
                s(&self.path("model.grvc")),
                "--seed",
                "3",
            ],
            &[],
        )
    }

    fn trained(self) -> Self {
        let out = self.train();
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        self
    }
}

#[test]
fn train_writes_checkpoint_and_trace() {
    let toy = Toy::new();
    let out = toy.train();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let json = summary(&out);
    assert_eq!(json["epochs"], 5);
    assert_eq!(json["pairs"], 18);
    assert!(toy.path("model.grvc").exists());
    let trace = fs::read_to_string(toy.path("model.trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "epoch,loss_total,loss_emb,loss_kl");
    assert_eq!(lines.len(), 6);
    assert!(stderr(&out).contains("epoch"), "logs go to stderr");

    // Same seed, same trace.
    let first = trace.clone();
    assert_eq!(toy.train().status.code(), Some(0));
    assert_eq!(fs::read_to_string(toy.path("model.trace.csv")).unwrap(), first);
}

#[test]
fn usage_errors_exit_1() {
    let toy = Toy::new();
    let out = grove(&["train", "--images", "a", "--texts", "b", "--config", "c", "--out", "d"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--manifest"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());

    fs::write(toy.path("bad.cfg"), "kernel = bogus\n").unwrap();
    let out = grove(
        &[
            "train",
            "--images",
            s(&toy.path("img.grve")),
            "--texts",
            s(&toy.path("txt.grve")),
            "--manifest",
            s(&toy.path("pairs.tsv")),
            "--config",
            s(&toy.path("bad.cfg")),
            "--out",
            s(&toy.path("m.grvc")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("kernel"), "{}", stderr(&out));
    assert!(!toy.path("m.grvc").exists());

    let out = grove(&["select", "--ckpt", "x", "--pool", "y", "--modality", "image", "--k", "0", "--out", "z"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = grove(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn data_and_numerical_errors() {
    let toy = Toy::new();
    // Manifest pointing past the text file.
    fs::write(toy.path("broken.tsv"), "p0\t0\t99\tg0\ttrain\n").unwrap();
    let out = grove(
        &[
            "train",
            "--images",
            s(&toy.path("img.grve")),
            "--texts",
            s(&toy.path("txt.grve")),
            "--manifest",
            s(&toy.path("broken.tsv")),
            "--config",
            s(&toy.path("train.cfg")),
            "--out",
            s(&toy.path("m.grvc")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("broken.tsv:1"), "{}", stderr(&out));

    fs::write(toy.path("wild.cfg"), "epochs = 50\nq_dim = 2\nm_inducing = 8\nlearning_rate = 1e8\n").unwrap();
    let out = grove(
        &[
            "train",
            "--images",
            s(&toy.path("img.grve")),
            "--texts",
            s(&toy.path("txt.grve")),
            "--manifest",
            s(&toy.path("pairs.tsv")),
            "--config",
            s(&toy.path("wild.cfg")),
            "--out",
            s(&toy.path("m.grvc")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

fn embed(toy: &Toy, input: &str, out: &str, extra: &[&str]) -> Output {
    let ckpt = toy.path("model.grvc");
    let mut args = vec![
        "embed",
        "--ckpt",
        s(&ckpt),
        "--input",
        input,
        "--modality",
        "text",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    grove(&args, &[])
}

#[test]
fn embed_outputs_and_determinism() {
    let toy = Toy::new().trained();
    let four = Matrix::from_fn(4, 4, |i, j| (i as f64 - j as f64) / 3.0);
    write_embeddings(&four, &toy.path("four.grve")).unwrap();
    let args = ["--restarts", "2", "--steps", "40", "--seed", "9"];
    let out = embed(&toy, s(&toy.path("four.grve")), s(&toy.path("e1.grve")), &args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let json = summary(&out);
    assert_eq!(json["rows"], 4);
    let csv = fs::read_to_string(toy.path("e1.uncertainty.csv")).unwrap();
    let rows: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|u| *u > 0.0));
    let (means, _) = read_embeddings(&toy.path("e1.grve")).unwrap();
    let (vars, _) = read_embeddings(&toy.path("e1.var.grve")).unwrap();
    assert_eq!(means.shape(), (4, 4));
    assert!(vars.as_slice().iter().all(|v| *v > 0.0));

    let out = embed(&toy, s(&toy.path("four.grve")), s(&toy.path("e2.grve")), &args);
    assert_eq!(out.status.code(), Some(0));
    for (a, b) in [("e1.grve", "e2.grve"), ("e1.var.grve", "e2.var.grve"), ("e1.uncertainty.csv", "e2.uncertainty.csv")] {
        assert_eq!(fs::read(toy.path(a)).unwrap(), fs::read(toy.path(b)).unwrap(), "{a} vs {b}");
    }

    // Thread count does not change results.
    let out = grove(
        &[
            "embed",
            "--ckpt",
            s(&toy.path("model.grvc")),
            "--input",
            s(&toy.path("four.grve")),
            "--modality",
            "text",
            "--out",
            s(&toy.path("e3.grve")),
            "--restarts",
            "2",
            "--steps",
            "40",
            "--seed",
            "9",
        ],
        &[("GROVE_THREADS", "1")],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(fs::read(toy.path("e1.grve")).unwrap(), fs::read(toy.path("e3.grve")).unwrap());
    let out = grove(&["select", "--ckpt", "x", "--pool", "y", "--modality", "image", "--out", "z"], &[("GROVE_THREADS", "many")]);
    assert_eq!(out.status.code(), Some(1));

    write_embeddings(&Matrix::zeros(3, 7), &toy.path("wide.grve")).unwrap();
    let out = embed(&toy, s(&toy.path("wide.grve")), s(&toy.path("e4.grve")), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("expected D = 4"), "{}", stderr(&out));
}

/// 3 images × 5 captions, all in the test split.
fn fifteen_caption_set(dir: &Path) -> (Matrix, Matrix) {
    let data = generate(&SyntheticConfig {
        n_pairs: 15,
        d: 4,
        seed: 21,
        ..SyntheticConfig::default()
    });
    let images = data.pairs.image.select_rows(&[0, 5, 10]);
    let texts = data.pairs.text.clone();
    write_embeddings(&images, &dir.join("img3.grve")).unwrap();
    write_embeddings(&texts, &dir.join("txt15.grve")).unwrap();
    let records: Vec<PairRecord> = (0..15)
        .map(|t| PairRecord {
            pair_id: format!("c{t}"),
            image_row: t / 5,
            text_row: t,
            group_id: format!("img{}", t / 5),
            split: Split::Test,
        })
        .collect();
    write_manifest(&records, &dir.join("toy15.tsv")).unwrap();
    (images, texts)
}

#[test]
fn retrieve_matches_brute_force() {
    let toy = Toy::new().trained();
    let (images, texts) = fifteen_caption_set(toy.dir.path());
    let out = grove(
        &[
            "retrieve",
            "--ckpt",
            s(&toy.path("model.grvc")),
            "--queries",
            s(&toy.path("img3.grve")),
            "--gallery",
            s(&toy.path("txt15.grve")),
            "--direction",
            "i2t",
            "--manifest",
            s(&toy.path("toy15.tsv")),
            "--distance",
            "w2",
            "--out",
            s(&toy.path("report.json")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let json = summary(&out);
    let report: Value = serde_json::from_str(&fs::read_to_string(toy.path("report.json")).unwrap()).unwrap();

    // Oracle: embed with the same settings, rank every caption, check the top one.
    let model = grove_core::dataio::load_checkpoint(&toy.path("model.grvc")).unwrap();
    let fit = LatentFitConfig::for_model(&model.config);
    let q = batch_embed(&model, &images, Modality::Image, &fit).unwrap();
    let g = batch_embed(&model, &texts, Modality::Text, &fit).unwrap();
    let mut hits = 0;
    for (i, qi) in q.iter().enumerate() {
        let qd = DiagGaussian::from(qi);
        let mut best = (f64::INFINITY, 0);
        for (j, gj) in g.iter().enumerate() {
            let d = Distance::W2.eval(&qd, &DiagGaussian::from(gj)).unwrap();
            if d < best.0 {
                best = (d, j);
            }
        }
        let hit = best.1 / 5 == i;
        hits += hit as usize;
        assert_eq!(report["first_hit_rank"][i] == 1, hit);
    }
    assert_eq!(json["recall_at_1"].as_f64().unwrap(), hits as f64 / 3.0);
    assert_eq!(json["queries"], 3);
    assert_eq!(json["gallery"], 15);

    let out = grove(
        &[
            "retrieve",
            "--ckpt",
            s(&toy.path("model.grvc")),
            "--queries",
            s(&toy.path("img3.grve")),
            "--gallery",
            s(&toy.path("txt15.grve")),
            "--direction",
            "i2t",
            "--manifest",
            s(&toy.path("toy15.tsv")),
            "--distance",
            "hamming",
            "--out",
            s(&toy.path("r2.json")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn self_retrieval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SyntheticConfig {
        n_pairs: 12,
        d: 4,
        seed: 5,
        ..SyntheticConfig::default()
    });
    let cfg = TrainConfig {
        q_dim: 2,
        m_inducing: 6,
        ..TrainConfig::default()
    };
    let (mut model, _) = init_model(&data.pairs, &cfg).unwrap();
    model.gp_text = model.gp_image.clone();
    save_checkpoint(&model, &dir.path().join("twin.grvc")).unwrap();
    write_embeddings(&data.pairs.image, &dir.path().join("z.grve")).unwrap();
    let records: Vec<PairRecord> = (0..12)
        .map(|i| PairRecord {
            pair_id: format!("p{i}"),
            image_row: i,
            text_row: i,
            group_id: format!("g{i}"),
            split: Split::Test,
        })
        .collect();
    write_manifest(&records, &dir.path().join("self.tsv")).unwrap();
    let z = s(&dir.path().join("z.grve")).to_owned();
    for distance in ["w2", "kl", "cosine"] {
        let out = grove(
            &[
                "retrieve",
                "--ckpt",
                s(&dir.path().join("twin.grvc")),
                "--queries",
                &z,
                "--gallery",
                &z,
                "--direction",
                "t2i",
                "--manifest",
                s(&dir.path().join("self.tsv")),
                "--distance",
                distance,
                "--out",
                s(&dir.path().join("self.json")),
            ],
            &[],
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert_eq!(summary(&out)["recall_at_1"].as_f64(), Some(1.0), "{distance}");
    }
}

fn calibrate(toy: &Toy, bins: &str) -> Output {
    grove(
        &[
            "calibrate",
            "--ckpt",
            s(&toy.path("model.grvc")),
            "--queries",
            s(&toy.path("txt15.grve")),
            "--gallery",
            s(&toy.path("img3.grve")),
            "--direction",
            "t2i",
            "--manifest",
            s(&toy.path("toy15.tsv")),
            "--bins",
            bins,
            "--out",
            s(&toy.path("calib.csv")),
        ],
        &[],
    )
}

#[test]
fn calibrate_writes_bins_and_summary() {
    let toy = Toy::new().trained();
    fifteen_caption_set(toy.dir.path());
    let out = calibrate(&toy, "5");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let json = summary(&out);
    assert_eq!(json["queries"], 15);
    let s_val = json["spearman"].as_f64().unwrap();
    let r2 = json["r_squared"].as_f64().unwrap();
    assert_eq!(json["neg_sr2"].as_f64().unwrap(), -s_val * r2);
    let csv = fs::read_to_string(toy.path("calib.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bin,mean_uncertainty,recall_at_1,count");
    assert_eq!(lines.len(), 1 + 5 + 1);
    assert!(lines[6].starts_with("summary,"));
    let counts: usize = lines[1..6].iter().map(|l| l.split(',').nth(3).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 15);

    let out = calibrate(&toy, "16");
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn select_orders_by_uncertainty() {
    let toy = Toy::new().trained();
    let out = grove(
        &[
            "select",
            "--ckpt",
            s(&toy.path("model.grvc")),
            "--pool",
            s(&toy.path("img.grve")),
            "--modality",
            "image",
            "--k",
            "24",
            "--out",
            s(&toy.path("sel.csv")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(toy.path("sel.csv")).unwrap();
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 24);
    let mut seen: Vec<usize> = rows.iter().map(|r| r.0).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..24).collect::<Vec<_>>());
    assert!(rows.windows(2).all(|w| w[0].1 >= w[1].1));

    // Without --k the default of 500 exceeds the 24-row pool.
    let out = grove(
        &[
            "select",
            "--ckpt",
            s(&toy.path("model.grvc")),
            "--pool",
            s(&toy.path("img.grve")),
            "--modality",
            "image",
            "--out",
            s(&toy.path("sel2.csv")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("k = 500"), "{}", stderr(&out));
}
