//! End-to-end acceptance suite. Runs every criterion in sequence (timing
//! checks are sensitive to concurrent load), prints one PASS/FAIL line per
//! criterion and fails if any criterion failed.
//!
//! Run with `cargo test -p dgvc --test acceptance -- --nocapture`.

use std::time::Instant;

use dgvc::autodiff::Graph;
use dgvc::evalkit::{mcd, mode_coverage_test, MixtureSpec, MCD_SCALE};
use dgvc::features::{
    compute_speaker_stats, convert_logf0, decode, encode, make_synthetic_corpus, read_features, write_features,
    CorpusConfig, FeatureSequence, SyntheticCorpus,
};
use dgvc::nets::checkpoint::Checkpoint;
use dgvc::nets::toy::{MlpDiscriminator, MlpGenerator, MlpSpec};
use dgvc::nets::{Discriminator, Generator, Params, Preset};
use dgvc::objectives::{d_loss, g_adv_in_graph, g_adv_loss, mean_abs};
use dgvc::rng::{Purpose, Stream};
use dgvc::schedule::{forward_marginal_sample, forward_step_sample, posterior_params, DiffusionSchedule, ScheduleConfig};
use dgvc::trainer::toy::{train_toy, ToyConfig};
use dgvc::trainer::{
    checkpoint_path, convert_with, marginal_in_graph, posterior_in_graph, state_checkpoint, train_loop, Converter,
    Direction, ModelSpec, RunOptions, TrainConfig, FINAL_CHECKPOINT,
};
use dgvc::Tensor;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: usize, name: &'static str, pass: bool, detail: String) {
    println!("[{}] criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, name, pass, detail });
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = xs.clone().count();
    let m = xs.clone().sum::<f64>() / n as f64;
    let v = xs.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, v, n)
}

// 1. Iterated forward steps against the closed-form marginal.
fn marginal_equivalence() -> (bool, String) {
    let started = Instant::now();
    let sched = ScheduleConfig::default().build().unwrap();
    let draws = 100_000;
    let x0_vals = [-1.3, 0.0, 0.6, 2.2];
    let k = x0_vals.len();
    let x0 = Tensor::<f64>::from_fn(&[draws, k], |i| x0_vals[i % k]);
    let mut rng = Stream::new(1, Purpose::Noise);
    let mut x = x0.clone();
    for t in 1..=sched.steps() {
        x = forward_step_sample(&x, t, &sched, &mut rng).unwrap();
    }
    let t = sched.steps();
    let closed = forward_marginal_sample(&x0, t, &sched, &mut rng).unwrap();
    // Analytic moments of the marginal, computed from the betas directly.
    let alpha_bar: f64 = sched.betas().iter().map(|b| 1.0 - b).product();
    let mut worst: f64 = 0.0;
    for (e, &x0v) in x0_vals.iter().enumerate() {
        let col = |s: &Tensor<f64>| s.data().iter().skip(e).step_by(k).copied().collect::<Vec<_>>();
        let (it, cf) = (col(&x), col(&closed));
        let (mi, vi, n) = mean_var(it.iter().copied());
        let (mc, vc, _) = mean_var(cf.iter().copied());
        let (mean, var) = (alpha_bar.sqrt() * x0v, 1.0 - alpha_bar);
        let se_m = (var / n as f64).sqrt();
        let se_v = var * (2.0 / (n as f64 - 1.0)).sqrt();
        // Differences of two independent estimates carry sqrt(2) of the SE.
        for z in [
            (mi - mean).abs() / se_m,
            (vi - var).abs() / se_v,
            (mi - mc).abs() / (se_m * 2f64.sqrt()),
            (vi - vc).abs() / (se_v * 2f64.sqrt()),
        ] {
            worst = worst.max(z);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    (worst <= 3.0 && secs < 30.0, format!("max deviation {worst:.2} SE over {k} elements x {draws} draws, {secs:.1}s"))
}

/// Posterior moments of a scalar `x_{t-1}` by brute-force Bayes on a grid.
fn grid_bayes(betas: &[f64], t: usize, x0: f64, xt: f64) -> (f64, f64) {
    let alpha_bar_prev: f64 = betas[..t - 1].iter().map(|b| 1.0 - b).product();
    let beta = betas[t - 1];
    let (pm, pv) = (alpha_bar_prev.sqrt() * x0, 1.0 - alpha_bar_prev);
    let n = 200_000;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / n as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let prior = (-(x - pm).powi(2) / (2.0 * pv)).exp();
        let like = (-(xt - (1.0 - beta).sqrt() * x).powi(2) / (2.0 * beta)).exp();
        let w = prior * like;
        z += w;
        m1 += w * x;
        m2 += w * x * x;
    }
    let m = m1 / z;
    (m, m2 / z - m * m)
}

// 2. Closed-form posterior against grid Bayes.
fn posterior_oracle() -> (bool, String) {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for sched in [DiffusionSchedule::linear(2, 0.5, 0.99).unwrap(), ScheduleConfig::default().build().unwrap()] {
        for t in 1..=sched.steps() {
            for &(x0, xt) in &[(0.8, -0.3), (-1.5, 1.1), (0.0, 2.0)] {
                let (mean, var) = posterior_params(
                    &Tensor::<f64>::full(&[1], x0),
                    &Tensor::full(&[1], xt),
                    t,
                    &sched,
                )
                .unwrap();
                let (gm, gv) = if t == 1 { (x0, 0.0) } else { grid_bayes(sched.betas(), t, x0, xt) };
                worst = worst.max((mean.data()[0] - gm).abs()).max((var - gv).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    (worst <= 1e-3 && secs < 10.0, format!("max abs error {worst:.2e} (T=2 and T=4), {secs:.2}s"))
}

fn zeroed<T: dgvc::Scalar>(p: &mut Params<T>) {
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}

// 3. Fixed points at an uninformative discriminator.
fn loss_fixed_points() -> (bool, String) {
    let mut rng = Stream::new(2, Purpose::Init);
    let mut disc = Discriminator::<f64>::new(Preset::Tiny.discriminator(35), &mut rng).unwrap();
    zeroed(disc.params_mut());
    let a = rng.normal_tensor(&[2, 35, 16]);
    let b = rng.normal_tensor(&[2, 35, 16]);
    let c = rng.normal_tensor(&[2, 35, 16]);
    let d = d_loss(&disc, (&a, &b), (&c, &b), &[1, 3]).unwrap().value();
    let g = g_adv_loss(&disc, &c, &b, &[1, 3]).unwrap().value;
    let (ed, eg) = ((d - 2.0 * std::f64::consts::LN_2).abs(), (g - std::f64::consts::LN_2).abs());
    (ed <= 1e-12 && eg <= 1e-12, format!("|d_loss - 2ln2| = {ed:.1e}, |g_adv - ln2| = {eg:.1e}"))
}

/// Central differences of `f` with respect to every parameter in `p`.
fn numeric_grad(p: &Params<f64>, mut f: impl FnMut(&Params<f64>) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut out = Vec::new();
    let mut q = p.clone();
    for i in 0..p.len() {
        for j in 0..p.tensors()[i].len() {
            let orig = q.tensors()[i].data()[j];
            q.tensors_mut()[i].data_mut()[j] = orig + h;
            let up = f(&q);
            q.tensors_mut()[i].data_mut()[j] = orig - h;
            let down = f(&q);
            q.tensors_mut()[i].data_mut()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

fn flatten(grads: &[Tensor<f64>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}

/// Largest relative error `|a - n| / max(|a|, |n|)`. The denominator is
/// floored at 1e-8 so that exactly-zero gradients compare absolutely.
fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// 4. Analytic gradients against central differences on sub-100-parameter toys.
fn gradient_verification() -> (bool, String) {
    let spec = MlpSpec { data_dim: 2, hidden: 4, latent_dim: 2, time_embed_dim: 2 };
    let mut init = Stream::new(5, Purpose::Init);
    let g_xy = MlpGenerator::<f64>::new(spec, &mut init).unwrap();
    let g_yx = MlpGenerator::<f64>::new(spec, &mut init).unwrap();
    let disc = MlpDiscriminator::<f64>::new(spec, &mut init).unwrap();
    let n_params = [g_xy.params().count(), disc.params().count()];
    let sched = ScheduleConfig::default().build().unwrap();
    let mut data = Stream::new(6, Purpose::Batch);
    let (b, t, t2) = (3, 3, 2);
    let tv = vec![t; b];
    let x0 = data.normal_tensor::<f64>(&[b, 2]);
    let y0 = data.normal_tensor::<f64>(&[b, 2]);
    let x_t = forward_marginal_sample(&x0, t, &sched, &mut data).unwrap();
    let real_prev = data.normal_tensor::<f64>(&[b, 2]);
    let fake_prev = data.normal_tensor::<f64>(&[b, 2]);
    let z = data.normal_tensor::<f64>(&[b, 2]);
    let z2 = data.normal_tensor::<f64>(&[b, 2]);
    let mut errs = Vec::new();

    // d_loss with respect to D.
    let dl = d_loss(&disc, (&real_prev, &x_t), (&fake_prev, &x_t), &tv).unwrap();
    let num = numeric_grad(disc.params(), |p| {
        let mut d = disc.clone();
        *d.params_mut() = p.clone();
        d_loss(&d, (&real_prev, &x_t), (&fake_prev, &x_t), &tv).unwrap().value()
    });
    errs.push(("d_loss/D", max_rel_err(&flatten(&dl.grads), &num), norm(&num)));

    // g_adv through the posterior sample and a frozen D, with respect to G.
    let g_adv = |gen: &MlpGenerator<f64>, trainable: bool| {
        let mut g = Graph::new();
        let pg = gen.params().bind(&mut g, trainable);
        let xt = g.constant(x_t.clone());
        let zv = g.constant(z.clone());
        let x0_hat = gen.forward(&mut g, &pg, xt, zv, &tv).unwrap();
        let mut noise = Stream::new(7, Purpose::Noise);
        let fake = posterior_in_graph(&mut g, x0_hat, &x_t, t, &sched, &mut noise).unwrap();
        let pd = disc.params().bind(&mut g, false);
        let (out, term) = g_adv_in_graph(&mut g, &disc, &pd, fake, xt, &tv).unwrap();
        let grads = if trainable {
            let mut gr = g.backward(&[(out, term.grad.clone())]);
            pg.iter().map(|&v| gr.take(&g, v)).collect()
        } else {
            Vec::new()
        };
        (term.value, grads)
    };
    let analytic = flatten(&g_adv(&g_xy, true).1);
    let num = numeric_grad(g_xy.params(), |p| g_adv(&MlpGenerator::from_params(spec, p.clone()).unwrap(), false).0);
    errs.push(("g_adv/G", max_rel_err(&analytic, &num), norm(&num)));

    // Cycle L1 through G_XY, re-diffusion and G_YX, with respect to both.
    let cycle = |a: &MlpGenerator<f64>, bk: &MlpGenerator<f64>, trainable: bool| {
        let mut g = Graph::new();
        let pa = a.params().bind(&mut g, trainable);
        let pb = bk.params().bind(&mut g, trainable);
        let xt = g.constant(x_t.clone());
        let zv = g.constant(z.clone());
        let y_hat = a.forward(&mut g, &pa, xt, zv, &tv).unwrap();
        let mut noise = Stream::new(8, Purpose::Noise);
        let y_t = marginal_in_graph(&mut g, y_hat, t2, &sched, &mut noise).unwrap();
        let zv2 = g.constant(z2.clone());
        let back = bk.forward(&mut g, &pb, y_t, zv2, &vec![t2; b]).unwrap();
        let term = mean_abs(g.value(back), &x0).unwrap();
        if !trainable {
            return (term.value, Vec::new(), Vec::new());
        }
        let mut gr = g.backward(&[(back, term.grad)]);
        let ga: Vec<_> = pa.iter().map(|&v| gr.take(&g, v)).collect();
        let gb: Vec<_> = pb.iter().map(|&v| gr.take(&g, v)).collect();
        (term.value, ga, gb)
    };
    let (_, ga, gb) = cycle(&g_xy, &g_yx, true);
    let num_a = numeric_grad(g_xy.params(), |p| cycle(&MlpGenerator::from_params(spec, p.clone()).unwrap(), &g_yx, false).0);
    let num_b = numeric_grad(g_yx.params(), |p| cycle(&g_xy, &MlpGenerator::from_params(spec, p.clone()).unwrap(), false).0);
    errs.push(("cycle/G_XY", max_rel_err(&flatten(&ga), &num_a), norm(&num_a)));
    errs.push(("cycle/G_YX", max_rel_err(&flatten(&gb), &num_b), norm(&num_b)));

    // Identity L1 of G_XY on a diffused target sample.
    let y_t = forward_marginal_sample(&y0, t, &sched, &mut data).unwrap();
    let identity = |gen: &MlpGenerator<f64>, trainable: bool| {
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, trainable);
        let yv = g.constant(y_t.clone());
        let zv = g.constant(z.clone());
        let out = gen.forward(&mut g, &p, yv, zv, &tv).unwrap();
        let term = mean_abs(g.value(out), &y0).unwrap();
        if !trainable {
            return (term.value, Vec::new());
        }
        let mut gr = g.backward(&[(out, term.grad)]);
        (term.value, p.iter().map(|&v| gr.take(&g, v)).collect::<Vec<_>>())
    };
    let analytic = flatten(&identity(&g_xy, true).1);
    let num = numeric_grad(g_xy.params(), |p| identity(&MlpGenerator::from_params(spec, p.clone()).unwrap(), false).0);
    errs.push(("identity/G", max_rel_err(&analytic, &num), norm(&num)));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    let small = n_params.iter().all(|&n| n < 100);
    let nontrivial = errs.iter().all(|e| e.2 > 1e-6);
    (
        worst < 1e-4 && small && nontrivial,
        format!("G {} / D {} params; max rel err {worst:.1e} ({detail})", n_params[0], n_params[1]),
    )
}

fn corpus() -> SyntheticCorpus<f32> {
    make_synthetic_corpus(&CorpusConfig::default(), &mut Stream::new(0, Purpose::Corpus)).unwrap()
}

fn model() -> ModelSpec {
    ModelSpec { generator: Preset::Tiny.generator(35), discriminator: Preset::Tiny.discriminator(35) }
}

fn file_bytes(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

// 7. Mode coverage of the few-step sampler, with the single-step ablation.
fn mode_coverage() -> (bool, String) {
    let spec = MixtureSpec::default();
    let mut parts = Vec::new();
    let mut pass = false;
    for (label, sched) in [
        ("T=4", ScheduleConfig::default().build().unwrap()),
        ("T=1 ablation", DiffusionSchedule::linear(1, 0.1, 1.0).unwrap()),
    ] {
        let model = train_toy(&ToyConfig::default(), &spec, sched).unwrap();
        let draws = model.sample(10_000, &mut Stream::new(0, Purpose::Convert)).unwrap();
        let mut it = draws.into_iter();
        let r = mode_coverage_test(|| Ok(it.next().unwrap()), &spec, 10_000).unwrap();
        if label == "T=4" {
            pass = r.pass;
        }
        parts.push(format!(
            "{label}: {:.1}% / {:.1}% ({})",
            100.0 * r.fractions[0],
            100.0 * r.fractions[1],
            if r.pass { "covers both" } else { "fails band" }
        ));
    }
    (pass, parts.join("; "))
}

// 8. Conversion wall-clock against T_diff.
fn few_step_speed(corpus: &SyntheticCorpus<f32>) -> (bool, String) {
    let spec = model().generator;
    let gen = Generator::<f32>::new(spec, &mut Stream::new(3, Purpose::Init)).unwrap();
    let stats_x = compute_speaker_stats(&corpus.train_x).unwrap();
    let stats_y = compute_speaker_stats(&corpus.train_y).unwrap();
    let mut per_step = Vec::new();
    for steps in [2usize, 4, 8] {
        let sched = DiffusionSchedule::linear(steps, 0.9, 0.99).unwrap();
        let mut best = f64::INFINITY;
        for rep in 0..5 {
            let mut rng = Stream::new(rep, Purpose::Convert);
            let started = Instant::now();
            for x in &corpus.test_x {
                convert_with(&gen, spec.latent_dim, spec.downsample_factor, &sched, &stats_x, &stats_y, x, 1, &mut rng)
                    .unwrap();
            }
            best = best.min(started.elapsed().as_secs_f64());
        }
        per_step.push((steps, best, best / steps as f64));
    }
    let mean = per_step.iter().map(|p| p.2).sum::<f64>() / per_step.len() as f64;
    let worst = per_step.iter().map(|p| (p.2 / mean - 1.0).abs()).fold(0.0, f64::max);
    let detail = per_step.iter().map(|(s, t, _)| format!("T={s}: {:.1} ms", t * 1e3)).collect::<Vec<_>>().join(", ");
    (worst <= 0.2, format!("{detail}; per-step time within {:.1}% of the mean", 100.0 * worst))
}

/// Textbook MCD: one frame at a time, one coefficient at a time.
fn naive_mcd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        let mut s = 0.0;
        for d in 1..fa.len() {
            s += (fa[d] - fb[d]) * (fa[d] - fb[d]);
        }
        total += 10.0 / 10f64.ln() * (2.0 * s).sqrt();
    }
    total / a.len() as f64
}

fn seq_from_frames(frames: &[Vec<f64>]) -> FeatureSequence<f64> {
    let (t, q) = (frames.len(), frames[0].len());
    let mcep = Tensor::from_fn(&[q, t], |i| frames[i % t][i / t]);
    FeatureSequence::new(mcep, vec![0.0; t], vec![true; t], Vec::new(), 200.0, 16000).unwrap()
}

// 9. MCD against the naive loop and the analytic single-frame case.
fn mcd_oracle() -> (bool, String) {
    let mut rng = Stream::new(9, Purpose::Batch);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.int_inclusive(1, 40);
        let q = rng.int_inclusive(2, 36);
        let a: Vec<Vec<f64>> = (0..t).map(|_| (0..q).map(|_| rng.normal()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..t).map(|_| (0..q).map(|_| rng.normal()).collect()).collect();
        let m = mcd(&seq_from_frames(&a), &seq_from_frames(&b)).unwrap();
        worst = worst.max((m - naive_mcd(&a, &b)).abs());
    }
    let single = mcd(&seq_from_frames(&[vec![0.3, 1.0, 2.0]]), &seq_from_frames(&[vec![-4.0, 0.0, 2.0]])).unwrap();
    let analytic = 10.0 / 10f64.ln() * 2f64.sqrt();
    let e = (single - analytic).abs();
    (
        worst <= 1e-9 && e <= 1e-9 && (analytic - 6.1419).abs() < 1e-4 && (MCD_SCALE * 2f64.sqrt() - analytic).abs() < 1e-12,
        format!("max |module - naive| {worst:.1e} over 100 pairs; single frame {single:.6} dB (analytic {analytic:.6})"),
    )
}

// 10. log-F0 statistics transfer and bit-exact AP / file round trips.
fn feature_pipeline(corpus: &SyntheticCorpus<f32>, conv: &Converter<f32>) -> (bool, String) {
    let c64 = make_synthetic_corpus::<f64>(&CorpusConfig::default(), &mut Stream::new(0, Purpose::Corpus)).unwrap();
    let src = compute_speaker_stats(&c64.train_x).unwrap();
    let tgt = compute_speaker_stats(&c64.train_y).unwrap();
    let mut voiced = Vec::new();
    for s in &c64.train_x {
        let out = convert_logf0(s.logf0(), s.voiced(), &src, &tgt).unwrap();
        voiced.extend(out.iter().zip(s.voiced()).filter(|(_, &v)| v).map(|(&f, _)| f));
    }
    let (m, v, _) = mean_var(voiced.iter().copied());
    let stat_err = (m - tgt.logf0_mean).abs().max((v.sqrt() - tgt.logf0_std).abs());

    let x = &corpus.test_x[0];
    let outs = conv.convert(x, 2, &mut Stream::new(4, Purpose::Convert)).unwrap();
    let ap_ok = outs.iter().all(|o| o.ap() == x.ap());

    let dir = tempfile::tempdir().unwrap();
    let mut files_ok = true;
    for (i, s) in corpus.test_x.iter().chain(&outs).enumerate() {
        files_ok &= decode::<f32>(&encode(s)).unwrap() == *s;
        let p = dir.path().join(format!("{i}.dgvc"));
        write_features(s, &p).unwrap();
        let back = read_features::<f32>(&p).unwrap();
        files_ok &= back == *s && encode(&back) == file_bytes(&p);
    }
    // Files hold single precision; double-precision sequences with
    // representable values come back unchanged.
    for s in corpus.test_y.iter().take(2) {
        let wide = s.cast::<f64>();
        files_ok &= decode::<f64>(&encode(&wide)).unwrap() == wide;
    }
    (
        stat_err <= 1e-9 && ap_ok && files_ok,
        format!("log-F0 stat error {stat_err:.1e}; AP passthrough {ap_ok}; file round trips {files_ok}"),
    )
}

#[test]
fn acceptance() {
    let mut out = Vec::new();
    let (p, d) = marginal_equivalence();
    report(&mut out, 1, "diffusion marginal equivalence", p, d);
    let (p, d) = posterior_oracle();
    report(&mut out, 2, "posterior Bayes oracle", p, d);
    let (p, d) = loss_fixed_points();
    report(&mut out, 3, "loss fixed points", p, d);
    let (p, d) = gradient_verification();
    report(&mut out, 4, "gradient verification", p, d);

    // Shared tiny training runs for criteria 5, 6 and 10.
    let corpus = corpus();
    let cfg = TrainConfig::default();
    let sched = ScheduleConfig::default();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_c = tempfile::tempdir().unwrap();
    let run_a = train_loop(
        &cfg,
        &sched,
        &model(),
        &corpus.train_x,
        &corpus.train_y,
        &RunOptions { out_dir: Some(dir_a.path().into()), resume: None },
    )
    .unwrap();
    let run_b = train_loop(&cfg, &sched, &model(), &corpus.train_x, &corpus.train_y, &RunOptions::default()).unwrap();
    let mid = checkpoint_path(dir_a.path(), cfg.iterations / 2);
    let run_c = train_loop(
        &cfg,
        &sched,
        &model(),
        &corpus.train_x,
        &corpus.train_y,
        &RunOptions { out_dir: Some(dir_c.path().into()), resume: Some(mid.clone()) },
    )
    .unwrap();
    let bytes_a = file_bytes(&dir_a.path().join(FINAL_CHECKPOINT));
    let same_run = run_a.reports == run_b.reports && state_checkpoint(&run_b.state, &run_b.context).to_bytes() == bytes_a;
    let resumed = bytes_a == file_bytes(&dir_c.path().join(FINAL_CHECKPOINT))
        && run_c.reports[..] == run_a.reports[cfg.iterations as usize / 2..];
    report(
        &mut out,
        5,
        "determinism",
        same_run && resumed,
        format!(
            "{} steps twice: identical {same_run}; resume from step {} identical {resumed}",
            cfg.iterations,
            cfg.iterations / 2
        ),
    );

    let ck = Checkpoint::<f32>::load(&dir_a.path().join(FINAL_CHECKPOINT)).unwrap();
    let mut gains = Vec::new();
    let mut parts = Vec::new();
    let mut diversity_ok = true;
    for dir in Direction::BOTH {
        let conv = Converter::from_checkpoint(&ck, dir, &sched).unwrap();
        let (srcs, oracles): (&[FeatureSequence<f32>], Vec<FeatureSequence<f32>>) = match dir {
            Direction::X2y => (&corpus.test_x, corpus.test_x.iter().map(|x| corpus.oracle_map(x).unwrap()).collect()),
            Direction::Y2x => (&corpus.test_y, corpus.test_x.clone()),
        };
        let mut rng = Stream::new(0, Purpose::Convert);
        let (mut before, mut after) = (0.0, 0.0);
        for (x, o) in srcs.iter().zip(&oracles) {
            let c = conv.convert(x, 2, &mut rng).unwrap();
            diversity_ok &= c[0].mcep() != c[1].mcep();
            assert_eq!(c[0].mcep().shape(), x.mcep().shape());
            before += mcd(o, x).unwrap();
            after += mcd(o, &c[0]).unwrap();
        }
        let n = srcs.len() as f64;
        gains.push(before / n - after / n);
        parts.push(format!("{dir}: source {:.3} dB -> converted {:.3} dB", before / n, after / n));
    }
    let fast = run_a.seconds < 600.0;
    report(
        &mut out,
        6,
        "desk-scale conversion efficacy",
        gains.iter().all(|&g| g >= 1.0) && fast,
        format!("{}; training {:.0}s", parts.join(", "), run_a.seconds),
    );
    let first: f64 = run_a.reports[..100].iter().map(|r| r[0].total_g + r[1].total_g).sum::<f64>() / 200.0;
    let last: f64 = run_a.reports[run_a.reports.len() - 100..].iter().map(|r| r[0].total_g + r[1].total_g).sum::<f64>() / 200.0;
    let regression_ok = last <= 0.7 * first && diversity_ok;
    println!(
        "       also: total_g first-100 mean {first:.3} -> last-100 mean {last:.3} (bound: -30%); samples differ across z: {diversity_ok}"
    );

    let (p, d) = mode_coverage();
    report(&mut out, 7, "mode coverage", p, d);
    let (p, d) = few_step_speed(&corpus);
    report(&mut out, 8, "few-step speed", p, d);
    let (p, d) = mcd_oracle();
    report(&mut out, 9, "MCD oracle equality", p, d);
    let conv = Converter::from_checkpoint(&ck, Direction::X2y, &sched).unwrap();
    let (p, d) = feature_pipeline(&corpus, &conv);
    report(&mut out, 10, "feature pipeline", p, d);

    let failed: Vec<String> = out.iter().filter(|o| !o.pass).map(|o| format!("{} ({})", o.id, o.name)).collect();
    println!("acceptance: {}/{} criteria passed", out.len() - failed.len(), out.len());
    assert!(regression_ok, "training regression bound or sample diversity failed");
    assert!(failed.is_empty(), "failed criteria: {}; {:?}", failed.join(", "), out.iter().map(|o| &o.detail).collect::<Vec<_>>());
}
