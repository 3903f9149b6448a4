//! Acceptance run: one PASS/FAIL line per criterion on stderr, then a single
//! assertion over all of them.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use grove_core::dataio::{
    decode_checkpoint, decode_embeddings, encode_checkpoint, encode_embeddings, format_manifest, load_checkpoint,
    parse_manifest, save_checkpoint, write_embeddings, write_manifest, PairRecord, Split,
};
use grove_core::gplvm::{
    adam_step, init_model, loss_total, loss_total_value, AdamConfig, AdamState, Modality, PairedEmbeddings,
    TrainConfig,
};
use grove_core::kernels::{kernel_matrix, KernelFamily, KernelSpec};
use grove_core::metrics::{
    ece, js_diag, kl_diag, r_squared, recall_at_1, spearman, wasserstein2_diag, DiagGaussian, Distance,
};
use grove_core::numerics::{grad_check, Matrix};
use grove_core::svgp::{elbo, elbo_value, predict, SparseGp, VariationalCov, VariationalMode};
use grove_core::synthetic::{generate, perturb, SyntheticConfig, SyntheticGenerator};
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome, started: Instant) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "{} {status} ({:.1}s) {}",
        o.id,
        started.elapsed().as_secs_f64(),
        o.detail
    );
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| scale * normal(rng))
}

// ---------------------------------------------------------------- A1

fn a1_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let families = [KernelFamily::Rbf, KernelFamily::Matern15, KernelFamily::Matern25];
    let mut worst = 0.0f64;
    for k in 0..20 {
        let n = rng.random_range(4..=8);
        let m = rng.random_range(2..=4);
        let d = rng.random_range(2..=3);
        let q = rng.random_range(1..=2usize).min(d - 1);
        let data = PairedEmbeddings::new(random_matrix(&mut rng, n, d, 1.0), random_matrix(&mut rng, n, d, 1.0)).unwrap();
        let cfg = TrainConfig {
            q_dim: q,
            m_inducing: m,
            kernel: families[k % 3],
            variational_mode: if k % 2 == 0 { VariationalMode::Full } else { VariationalMode::Diagonal },
            lambda1: rng.random_range(0.1..2.0),
            lambda2: rng.random_range(0.1..2.0),
            x_init_scale: 1.0,
            seed: k as u64,
            ..TrainConfig::default()
        };
        let (mut model, _) = init_model(&data, &cfg).unwrap();
        let mut p = model.to_flat();
        for v in &mut p {
            *v += 0.2 * normal(&mut rng);
        }
        model.set_flat(&p).unwrap();
        let b = rng.random_range(1..=n);
        let batch = index::sample(&mut rng, n, b).into_vec();
        let analytic = loss_total(&model, &batch, &data).unwrap().grad.unwrap();
        let mut probe = model.clone();
        let err = grad_check(
            |p| {
                probe.set_flat(p).unwrap();
                loss_total_value(&probe, &batch, &data).unwrap().total
            },
            &p,
            &analytic,
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
    }
    Outcome {
        id: "A1",
        pass: worst < 1e-4,
        detail: format!("gradient check on 20 instances, max relative error {worst:.2e} (< 1e-4)"),
    }
}

// ---------------------------------------------------------------- A2 / A7 (exact limit)

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Dense GP regression: log marginal likelihood plus posterior mean/variance
/// (latent, no noise) at `xs`, all computed by direct matrix inversion.
struct ExactGp {
    lml: f64,
    mean: Vec<Vec<f64>>,
    var: Vec<f64>,
}

fn exact_gp(gp: &SparseGp, x: &Matrix, z: &Matrix, xs: &Matrix) -> ExactGp {
    let n = x.rows();
    let k = to_na(&kernel_matrix(&gp.kernel, x, x).unwrap());
    let c = k + DMatrix::identity(n, n) * gp.noise();
    let c_inv = c.clone().try_inverse().unwrap();
    let logdet = c.determinant().ln();
    let ksx = to_na(&kernel_matrix(&gp.kernel, xs, x).unwrap());
    let kss = to_na(&kernel_matrix(&gp.kernel, xs, xs).unwrap());
    let mut lml = 0.0;
    let mut mean = vec![vec![0.0; z.cols()]; xs.rows()];
    for d in 0..z.cols() {
        let r = DVector::from_fn(n, |i, _| z[(i, d)] - gp.mean);
        lml += -0.5 * (r.transpose() * &c_inv * &r)[0] - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let mu = &ksx * &c_inv * &r;
        for t in 0..xs.rows() {
            mean[t][d] = gp.mean + mu[t];
        }
    }
    let cov = kss - &ksx * &c_inv * ksx.transpose();
    ExactGp {
        lml,
        mean,
        var: (0..xs.rows()).map(|t| cov[(t, t)]).collect(),
    }
}

struct ExactLimit {
    max_err: f64,
    bound_ok: bool,
    worst_gap: f64,
    first_loss: f64,
    last_loss: f64,
}

fn exact_limit_run() -> ExactLimit {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (n, d, q) = (15, 2, 2);
    let x = random_matrix(&mut rng, n, q, 1.0);
    let z = Matrix::from_fn(n, d, |i, j| (x[(i, 0)] * (j as f64 + 1.0)).sin() + 0.3 * x[(i, 1)] + 0.1 * normal(&mut rng));
    let kernel = KernelSpec::new(KernelFamily::Rbf, 1.0).unwrap();
    let mut gp = SparseGp::new(
        kernel,
        0.0,
        0.05,
        x.clone(),
        z.clone(),
        VariationalCov::scaled_identity(VariationalMode::Full, n, d, 0.1),
    )
    .unwrap();
    // Kernel, noise, mean and inducing locations stay fixed; only q(u) moves.
    let fixed = 3 + n * q;
    let mut p = gp.to_flat();
    let mut state = AdamState::new(p.len());
    let steps = 2000;
    let mut bound_ok = true;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut first_loss = f64::NAN;
    for t in 0..steps {
        let out = elbo(&gp, &x, &z, n).unwrap();
        let exact = exact_gp(&gp, &x, &z, &x);
        worst_gap = worst_gap.max(out.value - exact.lml);
        bound_ok &= out.value <= exact.lml + 1e-8;
        if t == 0 {
            first_loss = -out.value;
        }
        let mut g: Vec<f64> = out.grad.to_flat().iter().map(|v| -v).collect();
        for v in &mut g[..fixed] {
            *v = 0.0;
        }
        let lr = 0.02 * (1e-3f64).powf(t as f64 / steps as f64);
        adam_step(&mut p, &g, &mut state, &AdamConfig { lr, ..AdamConfig::default() }).unwrap();
        gp.set_flat(&p).unwrap();
    }
    let final_elbo = elbo_value(&gp, &x, &z, n).unwrap();
    let last_loss = -final_elbo;
    let xs = Matrix::from_rows(&[
        x.row(0).to_vec(),
        x.row(7).to_vec(),
        vec![0.3, -0.4],
        vec![1.5, 1.0],
        vec![-2.0, 0.5],
    ]);
    let exact = exact_gp(&gp, &x, &z, &xs);
    bound_ok &= final_elbo <= exact.lml + 1e-8;
    let pred = predict(&gp, &xs, false).unwrap();
    let mut max_err = 0.0f64;
    for (t, p) in pred.iter().enumerate() {
        for j in 0..d {
            max_err = max_err.max((p.mean[j] - exact.mean[t][j]).abs());
            max_err = max_err.max((p.variance[j] - exact.var[t]).abs());
        }
    }
    ExactLimit {
        max_err,
        bound_ok,
        worst_gap,
        first_loss,
        last_loss,
    }
}

// ---------------------------------------------------------------- A4

fn ranks_brute(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn kl_oracle(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    // Multivariate formula with determinants and traces of diagonal matrices.
    let k = p.mean.len() as f64;
    let tr: f64 = p.variance.iter().zip(&q.variance).map(|(a, b)| a / b).sum();
    let maha: f64 = (0..p.mean.len()).map(|i| (q.mean[i] - p.mean[i]).powi(2) / q.variance[i]).sum();
    let det_p: f64 = p.variance.iter().product();
    let det_q: f64 = q.variance.iter().product();
    0.5 * (tr + maha - k + (det_q / det_p).ln())
}

fn a4_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = [0.0f64; 7];
    let names = ["spearman", "r_squared", "ece", "recall_at_1", "kl_diag", "js_diag", "wasserstein2_diag"];
    for _ in 0..100 {
        let n = rng.random_range(3..40);
        // Integer-valued draws so ties occur.
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let s = spearman(&a, &b).unwrap();
        if !s.degenerate {
            worst[0] = worst[0].max((s.value - pearson(&ranks_brute(&a), &ranks_brute(&b))).abs());
        }

        let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v + normal(&mut rng)).collect();
        let r2 = r_squared(&x, &y).unwrap().value;
        let nn = n as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let slope = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
        let icpt = (sy - slope * sx) / nn;
        let ybar = sy / nn;
        let ss_res: f64 = x.iter().zip(&y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
        let ss_tot: f64 = y.iter().map(|b| (b - ybar).powi(2)).sum();
        worst[1] = worst[1].max((r2 - (1.0 - ss_res / ss_tot)).abs());

        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let acc: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
        let bins = rng.random_range(1..15);
        let mut oracle = 0.0;
        for bin in 0..bins {
            let members: Vec<usize> = (0..n)
                .filter(|&i| ((conf[i] * bins as f64).floor() as usize).min(bins - 1) == bin)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mc = members.iter().map(|&i| conf[i]).sum::<f64>() / members.len() as f64;
            let ma = members.iter().map(|&i| acc[i]).sum::<f64>() / members.len() as f64;
            oracle += members.len() as f64 / nn * (mc - ma).abs();
        }
        worst[2] = worst[2].max((ece(&conf, &acc, bins).unwrap() - oracle).abs());

        let dim = rng.random_range(1..5);
        let gauss = |rng: &mut ChaCha8Rng| {
            DiagGaussian::new(
                (0..dim).map(|_| normal(rng)).collect(),
                (0..dim).map(|_| rng.random_range(0.1..3.0)).collect(),
            )
            .unwrap()
        };
        let nq = rng.random_range(1..6);
        let ng = rng.random_range(1..10);
        let queries: Vec<DiagGaussian> = (0..nq).map(|_| gauss(&mut rng)).collect();
        let gallery: Vec<DiagGaussian> = (0..ng).map(|_| gauss(&mut rng)).collect();
        let truth: Vec<Vec<usize>> = (0..nq)
            .map(|_| (0..ng).filter(|_| rng.random_bool(0.3)).collect())
            .collect();
        for distance in Distance::ALL {
            let got = recall_at_1(&queries, &gallery, &truth, distance).unwrap();
            let mut hits = 0;
            for (i, q) in queries.iter().enumerate() {
                let d: Vec<f64> = gallery.iter().map(|g| distance.eval(q, g).unwrap()).collect();
                let best = (0..ng).min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b))).unwrap();
                hits += truth[i].contains(&best) as usize;
            }
            worst[3] = worst[3].max((got - hits as f64 / nq as f64).abs());
        }

        let (p, q) = (gauss(&mut rng), gauss(&mut rng));
        worst[4] = worst[4].max((kl_diag(&p, &q).unwrap() - kl_oracle(&p, &q)).abs());
        let mid = DiagGaussian::new(
            (0..dim).map(|i| 0.5 * (p.mean[i] + q.mean[i])).collect(),
            (0..dim)
                .map(|i| 0.5 * (p.variance[i] + q.variance[i]) + 0.25 * (p.mean[i] - q.mean[i]).powi(2))
                .collect(),
        )
        .unwrap();
        let js = 0.5 * (kl_oracle(&p, &mid) + kl_oracle(&q, &mid));
        worst[5] = worst[5].max((js_diag(&p, &q).unwrap() - js).abs());
        // ‖Δμ‖² + tr(Σp + Σq − 2(Σp^½ Σq Σp^½)^½) for commuting (diagonal) covariances.
        let w2: f64 = (0..dim)
            .map(|i| {
                (p.mean[i] - q.mean[i]).powi(2) + p.variance[i] + q.variance[i]
                    - 2.0 * (p.variance[i].sqrt() * q.variance[i] * p.variance[i].sqrt()).sqrt()
            })
            .sum();
        worst[6] = worst[6].max((wasserstein2_diag(&p, &q).unwrap() - w2).abs());
    }
    let mut pass = true;
    let mut detail = String::from("100 instances each; max |error|:");
    for (i, name) in names.iter().enumerate() {
        let tol = if *name == "ece" { 1e-12 } else { 1e-9 };
        pass &= worst[i] < tol;
        let _ = write!(detail, " {name} {:.1e}", worst[i]);
    }
    Outcome { id: "A4", pass, detail }
}

// ---------------------------------------------------------------- A3 / A5 / A7 (synthetic)

fn grove(args: &[&str]) -> serde_json::Value {
    let out = Command::new(env!("CARGO_BIN_EXE_grove"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(0),
        "grove {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON summary")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_trace(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn read_uncertainty(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

const LEVELS: [f64; 3] = [0.3, 0.7, 1.5];

const A3_CONFIG: &str = "\
epochs = 300
batch_size = 64
q_dim = 2
m_inducing = 32
learning_rate = 0.03
x_init = pca
x_init_scale = 1
variational_init = prior
fit_learning_rate = 0.05
fit_init_scale = 1
seed = 0
";

struct Synthetic {
    outcomes: Vec<Outcome>,
    traces_ok: bool,
    trace_detail: String,
}

fn synthetic_runs(dir: &Path) -> Synthetic {
    let gen = SyntheticGenerator::new(SyntheticConfig {
        d: 16,
        modality_gap: 0.6,
        ..SyntheticConfig::default()
    });
    let train_set = gen.sample(300, 1);
    let test_set = gen.sample(100, 2);
    let path = |name: &str| dir.join(name);

    write_embeddings(&train_set.pairs.image, &path("train_img.grve")).unwrap();
    write_embeddings(&train_set.pairs.text, &path("train_txt.grve")).unwrap();
    let train_records: Vec<PairRecord> = (0..300)
        .map(|i| PairRecord {
            pair_id: format!("t{i}"),
            image_row: i,
            text_row: i,
            group_id: format!("t{i}"),
            split: Split::Train,
        })
        .collect();
    write_manifest(&train_records, &path("train.tsv")).unwrap();

    // Each test query appears once per corruption level; galleries stay clean.
    let corrupted = |z: &Matrix| {
        let levels: Vec<Matrix> = LEVELS.iter().enumerate().map(|(k, &s)| perturb(z, s, k as u64)).collect();
        Matrix::from_fn(300, z.cols(), |r, c| levels[r / 100][(r % 100, c)])
    };
    write_embeddings(&corrupted(&test_set.pairs.image), &path("q_img.grve")).unwrap();
    write_embeddings(&corrupted(&test_set.pairs.text), &path("q_txt.grve")).unwrap();
    write_embeddings(&test_set.pairs.image, &path("g_img.grve")).unwrap();
    write_embeddings(&test_set.pairs.text, &path("g_txt.grve")).unwrap();
    let i2t: Vec<PairRecord> = (0..300)
        .map(|r| PairRecord {
            pair_id: format!("q{r}"),
            image_row: r,
            text_row: r % 100,
            group_id: format!("q{r}"),
            split: Split::Test,
        })
        .collect();
    let t2i: Vec<PairRecord> = (0..300)
        .map(|r| PairRecord {
            pair_id: format!("q{r}"),
            image_row: r % 100,
            text_row: r,
            group_id: format!("img{}", r % 100),
            split: Split::Test,
        })
        .collect();
    write_manifest(&i2t, &path("i2t.tsv")).unwrap();
    write_manifest(&t2i, &path("t2i.tsv")).unwrap();

    let mut outcomes = Vec::new();
    let mut traces_ok = true;
    let mut trace_detail = String::new();
    let mut recall = Vec::new();
    for (tag, lambda2) in [("l400", 400.0), ("l0", 0.0)] {
        let started = Instant::now();
        let cfg_path = path(&format!("{tag}.cfg"));
        fs::write(&cfg_path, format!("{A3_CONFIG}lambda2 = {lambda2}\n")).unwrap();
        let ckpt = path(&format!("{tag}.grvc"));
        grove(&[
            "train",
            "--images",
            p(&path("train_img.grve")),
            "--texts",
            p(&path("train_txt.grve")),
            "--manifest",
            p(&path("train.tsv")),
            "--config",
            p(&cfg_path),
            "--out",
            p(&ckpt),
        ]);
        let trace = read_trace(&path(&format!("{tag}.trace.csv")));
        let (first, last) = (trace[0], *trace.last().unwrap());
        traces_ok &= last < first;
        let _ = write!(trace_detail, " λ2={lambda2}: {first:.3e} -> {last:.3e};");

        let r = grove(&[
            "retrieve",
            "--ckpt",
            p(&ckpt),
            "--queries",
            p(&path("q_img.grve")),
            "--gallery",
            p(&path("g_txt.grve")),
            "--direction",
            "i2t",
            "--manifest",
            p(&path("i2t.tsv")),
            "--distance",
            "w2",
            "--out",
            p(&path(&format!("{tag}_i2t.json"))),
        ]);
        recall.push(r["recall_at_1"].as_f64().unwrap());
        if lambda2 == 0.0 {
            continue;
        }

        // A3 (a): mean uncertainty per corruption level, both modalities.
        let mut increasing = true;
        let mut detail = String::from("mean uncertainty by level");
        for (modality, queries) in [("image", "q_img.grve"), ("text", "q_txt.grve")] {
            let out = path(&format!("emb_{modality}.grve"));
            grove(&["embed", "--ckpt", p(&ckpt), "--input", p(&path(queries)), "--modality", modality, "--out", p(&out)]);
            let u = read_uncertainty(&path(&format!("emb_{modality}.uncertainty.csv")));
            let means: Vec<f64> = (0..3).map(|l| u[l * 100..(l + 1) * 100].iter().sum::<f64>() / 100.0).collect();
            increasing &= means.windows(2).all(|w| w[1] > w[0]);
            let _ = write!(detail, " {modality} [{:.4}, {:.4}, {:.4}]", means[0], means[1], means[2]);
        }

        // A3 (b): −SR² from the calibrate command, both directions.
        let mut positive = true;
        let _ = write!(detail, "; -SR2");
        for (direction, queries, gallery, manifest) in [
            ("i2t", "q_img.grve", "g_txt.grve", "i2t.tsv"),
            ("t2i", "q_txt.grve", "g_img.grve", "t2i.tsv"),
        ] {
            let c = grove(&[
                "calibrate",
                "--ckpt",
                p(&ckpt),
                "--queries",
                p(&path(queries)),
                "--gallery",
                p(&path(gallery)),
                "--direction",
                direction,
                "--manifest",
                p(&path(manifest)),
                "--bins",
                "10",
                "--out",
                p(&path(&format!("calib_{direction}.csv"))),
            ]);
            let v = c["neg_sr2"].as_f64().unwrap();
            positive &= v > 0.0;
            let _ = write!(detail, " {direction} {v:.3}");
        }
        let secs = started.elapsed().as_secs_f64();
        outcomes.push(Outcome {
            id: "A3",
            pass: increasing && positive && secs < 300.0,
            detail: format!("{detail}; {secs:.0}s of 300s budget"),
        });
    }
    outcomes.push(Outcome {
        id: "A5",
        pass: recall[0] > recall[1],
        detail: format!(
            "i2t Recall@1 (W2) with λ2=400 {:.3} vs λ2=0 {:.3} (same seed, 300 corrupted queries)",
            recall[0], recall[1]
        ),
    });
    Synthetic {
        outcomes,
        traces_ok,
        trace_detail,
    }
}

// ---------------------------------------------------------------- A6

fn a6_determinism(dir: &Path) -> Outcome {
    let mut checks = Vec::new();

    // Same-seed CLI training twice.
    let data = generate(&SyntheticConfig {
        n_pairs: 40,
        d: 6,
        seed: 9,
        ..SyntheticConfig::default()
    });
    write_embeddings(&data.pairs.image, &dir.join("a6_img.grve")).unwrap();
    write_embeddings(&data.pairs.text, &dir.join("a6_txt.grve")).unwrap();
    let recs: Vec<PairRecord> = (0..40)
        .map(|i| PairRecord {
            pair_id: format!("p{i}"),
            image_row: i,
            text_row: i,
            group_id: format!("g{i}"),
            split: Split::Train,
        })
        .collect();
    write_manifest(&recs, &dir.join("a6.tsv")).unwrap();
    fs::write(dir.join("a6.cfg"), "epochs = 20\nbatch_size = 8\nq_dim = 2\nm_inducing = 10\nlearning_rate = 0.01\n").unwrap();
    let mut traces = Vec::new();
    let mut ckpts = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("a6_{run}.grvc"));
        grove(&[
            "train",
            "--images",
            p(&dir.join("a6_img.grve")),
            "--texts",
            p(&dir.join("a6_txt.grve")),
            "--manifest",
            p(&dir.join("a6.tsv")),
            "--config",
            p(&dir.join("a6.cfg")),
            "--out",
            p(&out),
            "--seed",
            "17",
        ]);
        traces.push(fs::read(dir.join(format!("a6_{run}.trace.csv"))).unwrap());
        ckpts.push(fs::read(&out).unwrap());
    }
    checks.push(("train traces identical", traces[0] == traces[1]));
    checks.push(("checkpoints identical", ckpts[0] == ckpts[1]));

    // Checkpoint save/load keeps 10 probe predictions bitwise.
    let model = load_checkpoint(&dir.join("a6_0.grvc")).unwrap();
    let again = dir.join("a6_again.grvc");
    save_checkpoint(&model, &again).unwrap();
    let reloaded = load_checkpoint(&again).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let probes = random_matrix(&mut rng, 10, 2, 1.0);
    let same_pred = [Modality::Image, Modality::Text].iter().all(|&m| {
        predict(model.gp(m), &probes, true).unwrap() == predict(reloaded.gp(m), &probes, true).unwrap()
    });
    checks.push(("10 probe predictions bitwise", same_pred));
    checks.push(("checkpoint bytes roundtrip", fs::read(&again).unwrap() == ckpts[0]));
    let enc = encode_checkpoint(&model);
    checks.push((
        "checkpoint encode/decode",
        encode_checkpoint(&decode_checkpoint(&enc, Path::new("mem")).unwrap()) == enc,
    ));

    // Embedding file: hand-encoded layout and a random roundtrip.
    let tiny = encode_embeddings(&Matrix::from_rows(&[[1.0, -2.0]]));
    let mut expected = b"GRVE".to_vec();
    expected.extend_from_slice(&1u16.to_le_bytes());
    expected.extend_from_slice(&[1, 0]);
    expected.extend_from_slice(&1u64.to_le_bytes());
    expected.extend_from_slice(&2u64.to_le_bytes());
    expected.extend_from_slice(&[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0xC0]);
    checks.push(("embedding byte layout", tiny == expected));
    let m = Matrix::from_fn(7, 5, |_, _| normal(&mut rng) as f32 as f64);
    let (back, _) = decode_embeddings(&encode_embeddings(&m), Path::new("mem")).unwrap();
    checks.push(("embedding roundtrip", back == m));

    let text = format_manifest(&recs);
    let parsed = parse_manifest(&text, Path::new("mem"), 40, 40).unwrap();
    checks.push(("manifest roundtrip", parsed == recs && format_manifest(&parsed) == text));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome {
        id: "A6",
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} determinism/persistence checks hold", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    }
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut all = Vec::new();
    let _ = writeln!(std::io::stderr());

    let t = Instant::now();
    let a1 = a1_gradients();
    report(&a1, t);
    all.push(a1);

    let t = Instant::now();
    let exact = exact_limit_run();
    let a2 = Outcome {
        id: "A2",
        pass: exact.max_err < 1e-3,
        detail: format!(
            "M=N=15 after 2000 steps: max |predict - exact GP| {:.2e} (< 1e-3)",
            exact.max_err
        ),
    };
    report(&a2, t);
    all.push(a2);

    let t = Instant::now();
    let synthetic = synthetic_runs(dir.path());
    for o in synthetic.outcomes {
        report(&o, t);
        all.push(o);
    }

    let t = Instant::now();
    let a4 = a4_metric_oracles();
    report(&a4, t);
    all.push(a4);

    let t = Instant::now();
    let a6 = a6_determinism(dir.path());
    report(&a6, t);
    all.push(a6);

    let t = Instant::now();
    let exact_ok = exact.bound_ok && exact.last_loss < exact.first_loss;
    let a7 = Outcome {
        id: "A7",
        pass: exact_ok && synthetic.traces_ok,
        detail: format!(
            "exact limit: max ELBO - LML {:.2e} over 2000 steps, loss {:.3} -> {:.3}; final < first epoch:{}",
            exact.worst_gap, exact.first_loss, exact.last_loss, synthetic.trace_detail
        ),
    };
    report(&a7, t);
    all.push(a7);

    let failed: Vec<&str> = all.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
