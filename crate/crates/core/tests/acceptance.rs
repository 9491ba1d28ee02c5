//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 9 and 10 train SAC agents for minutes to tens of minutes and only
//! run when `--ignored` (or `--heavy`) is passed:
//!
//! ```text
//! cargo test --release -p vsictl-core --test acceptance -- --ignored
//! ```

use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsictl::baselines::{pi_step, FcsMpc, FcsMpcConfig, PiController, PiGains};
use vsictl::bench::{
    ablation_table, emit_report, find_scenario, metrics, rollout, run_matrix, ControllerSpec, MetricReport,
    PolicyController, ReportFormat,
};
use vsictl::distill::{
    adaptive_weight, collect_dataset, collection_scenarios, distill_loss, loss_samples, train_student,
    train_student_with, write_loss_curve, CollectConfig, DistillConfig, ExpertDataset, Partition, Record, Trajectory,
};
use vsictl::env::{lyapunov, reward, EpisodeConfig, NormScales, Observation, RewardConfig, OBS_DIM};
use vsictl::nn::{
    checkpoint::encode as encode_checkpoint, estimated_time_us, inference_flops, param_count, Activation, Mlp, MlpSpec, Precision,
    DSP_THROUGHPUT_MFLOPS,
};
use vsictl::plant::{self, CircuitParams, DiscreteModel, LoadParams, LoadSchedule, PlantAction, PlantState};
use vsictl::sac::{train, train_with, write_training_log, SacConfig};
use vsictl::signal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn specs() -> [MlpSpec; 3] {
    [
        MlpSpec::new(6, &[128, 64, 64], 2),
        MlpSpec::new(6, &[45, 30, 30], 2),
        MlpSpec::new(6, &[20, 15], 2),
    ]
}

fn c1_param_counts() -> Outcome {
    let got: Vec<u64> = specs().iter().map(param_count).collect();
    check(got == [13442, 2687, 487], format!("params {got:?}"))
}

fn c2_flops_latency() -> Outcome {
    let flops: Vec<u64> = specs().iter().map(inference_flops).collect();
    let us: Vec<f64> = flops.iter().map(|&f| estimated_time_us(f, DSP_THROUGHPUT_MFLOPS)).collect();
    let rows = ablation_table(
        &specs().iter().enumerate().map(|(i, s)| (format!("n{i}"), s.clone())).collect::<Vec<_>>(),
        DSP_THROUGHPUT_MFLOPS,
    );
    let ratios: Vec<f64> = rows.iter().map(|r| r.compression_ratio).collect();
    let rounded: Vec<f64> = us.iter().map(|u| (u * 10.0).round() / 10.0).collect();
    let ok = flops == [26368, 5160, 900]
        && us.iter().zip([32.96, 6.45, 1.125]).all(|(a, b)| (a - b).abs() < 1e-9)
        && rounded == [33.0, 6.5, 1.1]
        && (ratios[1] - 5.00).abs() < 0.005
        && (ratios[2] - 27.60).abs() < 0.005;
    check(
        ok,
        format!("flops {flops:?}, us {us:?}, ratios {:.2}/{:.2}", ratios[1], ratios[2]),
    )
}

fn c3_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for n in 0..20 {
        let depth = rng.gen_range(1..4);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..7)).collect();
        let (din, dout) = (rng.gen_range(1..5), rng.gen_range(1..4));
        let act = if n % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let net = Mlp::new(MlpSpec::new(din, &hidden, dout).with_activation(act), &mut rng).unwrap();
        let batch = 3;
        let x: Vec<f64> = (0..batch * din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..batch * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp, x: &[f64]| -> f64 {
            let (y, _) = m.forward_batch(x, batch).unwrap();
            y.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward_batch(&x, batch).unwrap();
        let g = net.backward(&cache, &c).unwrap();
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        for i in 0..net.num_params() {
            let (mut p, mut m) = (net.clone(), net.clone());
            p.params_mut()[i] += h;
            m.params_mut()[i] -= h;
            worst = worst.max(rel((loss(&p, &x) - loss(&m, &x)) / (2.0 * h), g.params[i]));
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            worst = worst.max(rel((loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h), g.input[i]));
        }
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e} over 20 nets"))
}

fn state_vec(s: &PlantState) -> [f64; 6] {
    [s.i_ld, s.i_lq, s.u_bus_d, s.u_bus_q, s.i_load_d, s.i_load_q]
}

fn rel_err(a: &PlantState, b: &PlantState) -> f64 {
    let (va, vb) = (state_vec(a), state_vec(b));
    let scale = vb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn c4_plant_fidelity() -> Outcome {
    let p = CircuitParams::default();
    let ts = 1e-4;
    let run = |load: LoadParams, u: PlantAction, x0: PlantState, horizon: f64, substeps: usize| {
        let sched = LoadSchedule::constant(load);
        let n = (horizon / ts).round() as usize;
        (0..n).fold(x0, |s, _| plant::step(&s, &u, &sched, &p, ts, substeps).unwrap())
    };
    // Worst per-period error against exact propagation, from rest and from
    // an off-equilibrium state, across light and heavy resistive loads.
    let mut err: f64 = 0.0;
    for r in [20.0, 50.0, 100.0, 200.0] {
        let load = LoadParams::resistive(r);
        let sched = LoadSchedule::constant(load);
        let exact = DiscreteModel::new(&load, &p, ts);
        let (_, u_ss) = plant::steady_state([p.nominal_peak_voltage(), 0.0], &load, &p);
        let kicked = PlantState {
            i_ld: 1.0,
            u_bus_q: 20.0,
            ..Default::default()
        };
        for (x0, u) in [(PlantState::default(), u_ss), (kicked, PlantAction::new(300.0, -40.0))] {
            let (mut x, mut y) = (x0, x0);
            for _ in 0..(0.1 / ts).round() as usize {
                x = plant::step(&x, &u, &sched, &p, ts, plant::DEFAULT_SUBSTEPS).unwrap();
                y = exact.predict(&y, &u, ts);
                err = err.max(rel_err(&x, &y));
            }
        }
    }

    let rl = LoadParams::new(200.0, 10e-3).unwrap();
    let u2 = PlantAction::new(310.0, 30.0);
    let exact2 = DiscreteModel::new(&rl, &p, 0.02).predict(&PlantState::default(), &u2, 0.02);
    let e1 = rel_err(&run(rl, u2, PlantState::default(), 0.02, 4), &exact2);
    let e2 = rel_err(&run(rl, u2, PlantState::default(), 0.02, 8), &exact2);
    let order = (e1 / e2).log2();
    check(
        err < 1e-6 && (3.7..=4.3).contains(&order),
        format!("max per-period relative error {err:.2e} over 0.1 s ({} substeps), observed order {order:.3}", plant::DEFAULT_SUBSTEPS),
    )
}

fn c5_reward_suite() -> Outcome {
    let cfg = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reference = [310.2687, 0.0];
    for n in 0..100_000 {
        let s = PlantState {
            i_ld: rng.gen_range(-40.0..40.0),
            i_lq: rng.gen_range(-40.0..40.0),
            u_bus_d: rng.gen_range(-500.0..500.0),
            u_bus_q: rng.gen_range(-500.0..500.0),
            prev_i_ld: rng.gen_range(-40.0..40.0),
            prev_i_lq: rng.gen_range(-40.0..40.0),
            ..Default::default()
        };
        let prev_v = rng.gen_range(0.0..2e5);
        let thd = rng.gen_range(0.0..20.0);
        let b = reward(prev_v, &s, reference, &cfg, thd);
        let i_sq = s.i_ld * s.i_ld + s.i_lq * s.i_lq;
        let ok = b.r1 <= 0.0
            && b.r2 <= 0.0
            && b.r3 <= 0.0
            && b.r4 <= 0.0
            && b.total == b.r1 + b.r2 + b.r3 + b.r4
            && ((b.r1 < 0.0) == (b.v_k > prev_v))
            && ((b.r3 == 0.0) == (i_sq <= cfg.i_max * cfg.i_max))
            && ((b.r4 == 0.0) == (thd <= cfg.thd_limit));
        if !ok {
            return Err(format!("invariant broken on sample {n}: {b:?}"));
        }
    }
    let s = PlantState {
        u_bus_d: reference[0] - 10.0,
        u_bus_q: reference[1],
        ..Default::default()
    };
    let b = reward(0.0, &s, reference, &cfg, 0.0);
    let v_ok = lyapunov([10.0, 0.0], [0.0; 2], 1.0) == 50.0;
    check(
        v_ok && (b.total + 0.10005).abs() < 1e-12,
        format!("1e5 random samples hold all invariants; worked example total {:.12}", b.total),
    )
}

fn c6_thd() -> Outcome {
    let (f1, fs) = (50.0, 10_000.0);
    let n = 400;
    let wave = |h5: f64| -> Vec<f64> {
        (0..n)
            .map(|k| {
                let t = k as f64 / fs;
                (2.0 * PI * f1 * t).sin() + h5 * (2.0 * PI * 5.0 * f1 * t).sin()
            })
            .collect()
    };
    let distorted = signal::thd(&wave(0.05), f1, fs, 50).unwrap();
    let pure = signal::thd(&wave(0.0), f1, fs, 50).unwrap();
    check(
        (distorted - 5.0).abs() <= 0.01 && pure < 1e-6,
        format!("5 % 5th harmonic -> {distorted:.6} %, pure sine -> {pure:.2e} %"),
    )
}

/// Records whose action is `k * obs`, over a physically consistent state.
fn linear_dataset(parts: &[(&str, Partition)], len: usize, seed: u64) -> ExpertDataset {
    let k = [[0.3, -0.2, 0.1, 0.0, 0.15, -0.1], [-0.1, 0.25, 0.0, 0.2, -0.05, 0.1]];
    let p = CircuitParams::default();
    let r = [p.nominal_peak_voltage(), 0.0];
    let norm = NormScales::for_reference(r, &p, 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = parts
        .iter()
        .map(|(name, part)| Trajectory {
            scenario: name.to_string(),
            partition: *part,
            reference: r,
            l_f_mult: 1.0,
            c_f_mult: 1.0,
            ts: 1e-4,
            substeps: plant::DEFAULT_SUBSTEPS,
            norm,
            beta: 1.0,
            records: (0..len)
                .map(|i| {
                    let obs: [f64; OBS_DIM] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                    let phys = Observation::denormalize(&obs, &norm);
                    Record {
                        obs,
                        action: [0, 1].map(|j| (0..OBS_DIM).map(|c| k[j][c] * obs[c]).sum::<f64>()),
                        e_u: [phys[0], phys[1]],
                        i_l: [phys[4], phys[5]],
                        prev_i_l: [phys[4], phys[5]],
                        i_load: [0.0; 2],
                        load: [100.0, 0.0],
                        t: i as f64 * 1e-4,
                    }
                })
                .collect(),
        })
        .collect();
    ExpertDataset::new(trajectories)
}

fn c7_distillation() -> Outcome {
    let cfg = DistillConfig::default();
    let w = [
        adaptive_weight([0.001, 0.0], [0.0; 2], &cfg),
        adaptive_weight([0.01, 0.0], [0.0; 2], &cfg),
        adaptive_weight([0.0048, 0.0], [0.0; 2], &cfg),
    ];
    let parts = [("a", Partition::Train), ("b", Partition::Train), ("c", Partition::Train), ("held", Partition::Test)];
    let d = linear_dataset(&parts, 800, 7);
    let nominal = CircuitParams::default();

    let teacher = Mlp::new(MlpSpec::new(6, &[8], 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut self_d = d.clone();
    for t in &mut self_d.trajectories {
        for r in &mut t.records {
            let z = teacher.predict(&r.obs).unwrap();
            r.action = [z[0].tanh(), z[1].tanh()];
        }
    }
    let samples = loss_samples(&self_d, Partition::Train, &nominal).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let no_stab = DistillConfig { lambda_stab: 0.0, ..cfg.clone() };
    let (j, _) = distill_loss(&teacher, &refs, &no_stab, false).unwrap();

    let out = train_student(&MlpSpec::new(6, &[20, 15], 2), &d, &nominal, &no_stab).unwrap();
    let best = out.curve.iter().map(|p| p.test_mse).fold(f64::INFINITY, f64::min);
    check(
        w == [1.0, 10.0, 1.0] && j.total == 0.0 && best < 1e-3 && out.curve.len() == 200,
        format!("weights {w:?}, J(student = teacher) = {:.1e}, S2 held-out MSE {best:.2e} within 200 epochs", j.total),
    )
}

fn c8_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..32 {
        let n = rng.gen_range(3..8);
        let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let mut parts: Vec<(&str, Partition)> = names
            .iter()
            .map(|s| (s.as_str(), if rng.gen_bool(0.4) { Partition::Test } else { Partition::Train }))
            .collect();
        parts[0].1 = Partition::Train;
        parts[n - 1].1 = Partition::Test;
        let d = linear_dataset(&parts, 30, case);
        let test_ids = d.ids(Partition::Test);
        let cfg = DistillConfig {
            epochs: 2,
            batch: 16,
            seed: case,
            ..DistillConfig::default()
        };
        let mut leaked = Vec::new();
        train_student_with(&MlpSpec::new(6, &[4], 2), &d, &CircuitParams::default(), &cfg, |ids| {
            leaked.extend(ids.iter().filter(|i| test_ids.contains(i)).copied());
        })
        .unwrap();
        if !leaked.is_empty() {
            return Err(format!("case {case}: held-out trajectories {leaked:?} reached a gradient batch"));
        }
    }
    // The collected dataset routes every held-out load-step trajectory to test.
    let teacher = Mlp::new(MlpSpec::new(6, &[8], 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut scenarios = collection_scenarios();
    for s in &mut scenarios {
        s.episode.duration = 0.02;
        let steps = s.schedule().steps().to_vec();
        s.episode.schedule = Some(LoadSchedule::new(vec![(0.0, steps[0].1), (0.01, steps[1].1)]).unwrap());
    }
    let c = collect_dataset(&teacher, &scenarios, &CircuitParams::default(), &RewardConfig::default(), &CollectConfig::default())
        .unwrap();
    let held: Vec<_> = c.dataset.trajectories.iter().filter(|t| t.scenario == "case1").map(|t| t.partition).collect();
    let ok = c.dataset.check_isolation().is_ok() && !held.is_empty() && held.iter().all(|p| *p == Partition::Test);
    check(ok, "32 random partitions: no held-out id in any batch; case1 collected only into test".into())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c9_training_trend() -> Outcome {
    let mut lines = Vec::new();
    let mut passed = 0;
    for seed in 0..3u64 {
        let t = Instant::now();
        let cfg = SacConfig {
            episodes: 100,
            seed,
            ..SacConfig::default()
        };
        let res = train(&EpisodeConfig::default(), &RewardConfig::default(), &CircuitParams::default(), &cfg).unwrap();
        let r: Vec<f64> = res.log.iter().map(|e| e.ret).collect();
        let (first, last) = (mean(&r[..10]), mean(&r[90..]));
        if last > first {
            passed += 1;
        }
        lines.push(format!("seed {seed}: first {first:.1}, last {last:.1} ({:.0} s)", t.elapsed().as_secs_f64()));
    }
    check(passed >= 2, format!("{passed}/3 seeds improve; {}", lines.join("; ")))
}

fn c10_case1() -> Outcome {
    let nominal = CircuitParams::default();
    let reward_cfg = RewardConfig::default();
    let art = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&art).unwrap();

    let t0 = Instant::now();
    let cfg = SacConfig {
        seed: 0,
        ..SacConfig::default()
    };
    let res = train_with(&EpisodeConfig::default(), &reward_cfg, &nominal, &cfg, |e| {
        if e.episode % 50 == 49 {
            eprintln!("  [criterion 10] episode {} return {:.1}", e.episode, e.ret);
        }
    })
    .unwrap();
    let teacher = res.final_actor();
    vsictl::nn::save_checkpoint(&teacher, art.join("teacher.ckpt"), Precision::F64).unwrap();
    write_training_log(art.join("train_log.csv"), &res.log).unwrap();
    let train_s = t0.elapsed().as_secs_f64();

    let collected = collect_dataset(&teacher, &collection_scenarios(), &nominal, &reward_cfg, &CollectConfig::default()).unwrap();
    let s1 = train_student(&MlpSpec::new(6, &[45, 30, 30], 2), &collected.dataset, &nominal, &DistillConfig::default()).unwrap();
    vsictl::nn::save_checkpoint(&s1.best, art.join("student_S1.ckpt"), Precision::F64).unwrap();
    write_loss_curve(art.join("loss_S1.csv"), &s1.curve).unwrap();

    let sc = find_scenario("case1").unwrap();
    let m = |c: &mut dyn vsictl::bench::Controller| -> MetricReport {
        metrics(&rollout(c, &sc, &nominal, &reward_cfg).unwrap(), &sc).unwrap()
    };
    let mt = m(&mut PolicyController::new("teacher", teacher.clone()));
    let ms = m(&mut PolicyController::new("S1", s1.best.clone()));
    let specs = [ControllerSpec::Pi(PiGains::default()), ControllerSpec::FcsMpc(FcsMpcConfig::default())];
    let traces = run_matrix(&specs, std::slice::from_ref(&sc), &nominal, &reward_cfg, 1).unwrap();
    let mp = metrics(&traces[0], &sc).unwrap();
    let mm = metrics(&traces[1], &sc).unwrap();
    emit_report(&art, &[mt.clone(), ms.clone(), mp.clone(), mm.clone()], &[], None, &[ReportFormat::Csv, ReportFormat::Markdown])
        .unwrap();

    let teacher_beats_pi = mt.relative_overshoot < mp.relative_overshoot;
    let student_close = (ms.relative_overshoot - mt.relative_overshoot).abs() <= 0.5;
    let thd = |r: &MetricReport| r.thd_voltage.unwrap_or(f64::NAN);
    let mpc_thd_lower = thd(&mm) < thd(&mp);
    let mpc_sse_nonzero = mm.sse > 1e-6;
    let best = &s1.curve[s1.best_epoch];
    let detail = format!(
        "teacher overshoot {:.2} % vs PI {:.2} % [{}]; S1 {:.2} % (|diff| {:.2} pp) [{}]; \
         THD_u MPC {:.2} % vs PI {:.2} % [{}]; MPC SSE {:.2} V [{}]; \
         teacher SSE {:.2} V, S1 train/test loss {:.4}/{:.4}; training {:.0} s; artifacts in {}",
        mt.relative_overshoot,
        mp.relative_overshoot,
        ok_str(teacher_beats_pi),
        ms.relative_overshoot,
        (ms.relative_overshoot - mt.relative_overshoot).abs(),
        ok_str(student_close),
        thd(&mm),
        thd(&mp),
        ok_str(mpc_thd_lower),
        mm.sse,
        ok_str(mpc_sse_nonzero),
        mt.sse,
        best.train_loss,
        best.test_loss,
        train_s,
        art.display(),
    );
    check(teacher_beats_pi && student_close && mpc_thd_lower && mpc_sse_nonzero, detail)
}

fn ok_str(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let ep = EpisodeConfig::default();
        let cfg = SacConfig {
            episodes: 2,
            seed: 11,
            ..SacConfig::default()
        };
        let res = train(&ep, &RewardConfig::default(), &CircuitParams::default(), &cfg).unwrap();
        let log = dir.path().join(format!("log_{tag}.csv"));
        write_training_log(&log, &res.log).unwrap();

        let parts = [("a", Partition::Train), ("held", Partition::Test)];
        let d = linear_dataset(&parts, 200, 4);
        let dc = DistillConfig {
            epochs: 5,
            ..DistillConfig::default()
        };
        let s = train_student(&MlpSpec::new(6, &[20, 15], 2), &d, &CircuitParams::default(), &dc).unwrap();
        let curve = dir.path().join(format!("curve_{tag}.csv"));
        write_loss_curve(&curve, &s.curve).unwrap();

        let sc = find_scenario("case2").unwrap();
        let specs = [
            ControllerSpec::Pi(PiGains::default()),
            ControllerSpec::Policy {
                name: "actor".into(),
                net: res.final_actor(),
            },
        ];
        let traces = run_matrix(&specs, std::slice::from_ref(&sc), &CircuitParams::default(), &RewardConfig::default(), 2).unwrap();
        let reports: Vec<_> = traces.iter().map(|t| metrics(t, &sc).unwrap()).collect();
        let rep_dir = dir.path().join(format!("report_{tag}"));
        let files = emit_report(&rep_dir, &reports, &traces, None, &[ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::PlotData]).unwrap();

        let mut out = vec![
            std::fs::read(&log).unwrap(),
            encode_checkpoint(&res.final_actor(), Precision::F64),
            std::fs::read(&curve).unwrap(),
            encode_checkpoint(&s.best, Precision::F64),
        ];
        out.extend(files.iter().map(|f| std::fs::read(f).unwrap()));
        out
    };
    let (a, b) = (run("a"), run("b"));
    check(a == b, format!("{} artifacts (log, checkpoints, loss curve, reports) byte-identical across two runs", a.len()))
}

/// Phase-neutral voltages of switching state `s`, rotated into the
/// synchronous frame with the d axis on phase a.
fn brute_vector(s: [u8; 3], v_dc: f64, theta: f64) -> PlantAction {
    let (a, b, c) = (s[0] as f64, s[1] as f64, s[2] as f64);
    let v = [
        v_dc * (2.0 * a - b - c) / 3.0,
        v_dc * (2.0 * b - a - c) / 3.0,
        v_dc * (2.0 * c - a - b) / 3.0,
    ];
    let mut d = 0.0;
    let mut q = 0.0;
    for (k, vk) in v.iter().enumerate() {
        let ang = theta - 2.0 * PI * k as f64 / 3.0;
        d += 2.0 / 3.0 * vk * ang.cos();
        q -= 2.0 / 3.0 * vk * ang.sin();
    }
    PlantAction::new(d, q)
}

fn c12_baselines() -> Outcome {
    let p = CircuitParams::default();
    let ts = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let order: [[u8; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 1, 1], [0, 0, 1], [1, 0, 1], [1, 1, 1]];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let load = if rng.gen_bool(0.5) {
            LoadParams::resistive(rng.gen_range(20.0..300.0))
        } else {
            LoadParams::new(rng.gen_range(20.0..300.0), rng.gen_range(1e-4..2e-2)).unwrap()
        };
        let mut s = PlantState {
            i_ld: rng.gen_range(-20.0..20.0),
            i_lq: rng.gen_range(-20.0..20.0),
            u_bus_d: rng.gen_range(-400.0..400.0),
            u_bus_q: rng.gen_range(-400.0..400.0),
            t: rng.gen_range(0.0..0.02),
            ..Default::default()
        };
        (s.i_load_d, s.i_load_q) = if load.is_resistive() {
            (s.u_bus_d / load.r, s.u_bus_q / load.r)
        } else {
            (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0))
        };
        let reference = [rng.gen_range(-380.0..380.0), rng.gen_range(-380.0..380.0)];
        let theta = rng.gen_range(0.0..2.0 * PI);
        let sched = LoadSchedule::constant(load);
        let mut best = (0, f64::INFINITY);
        for (i, sw) in order.iter().enumerate() {
            let next = plant::step(&s, &brute_vector(*sw, p.v_dc, theta), &sched, &p, ts, 200).unwrap();
            let cost = (reference[0] - next.u_bus_d).powi(2) + (reference[1] - next.u_bus_q).powi(2);
            if cost < best.1 {
                best = (i, cost);
            }
        }
        // V0 and V7 are the same zero vector.
        let canon = |i: usize| if i == 7 { 0 } else { i };
        let got = FcsMpc::new(FcsMpcConfig::default(), p, ts).decide(&s, reference, &load, theta).index;
        if canon(got) != canon(best.0) {
            mismatches += 1;
        }
    }

    let mut c = PiController::new(PiGains::default());
    c.int_v = [1.5, -0.5];
    c.int_i = [400.0, 2.0];
    let before = (c.int_v, c.int_i);
    let u = pi_step(&mut c, &PlantState::default(), (0.0, 0.0), [370.0, 0.0], &p, ts);
    let frozen = c.saturated && (c.int_v, c.int_i) == before && u.magnitude() <= p.voltage_limit() + 1e-9;
    let (eq, _) = plant::steady_state([p.nominal_peak_voltage(), 0.0], &LoadParams::resistive(100.0), &p);
    let s = PlantState {
        u_bus_d: eq.u_bus_d - 1.0,
        ..eq
    };
    let mut c = PiController::new(PiGains::default());
    pi_step(&mut c, &s, s.load_current(&LoadParams::resistive(100.0)), [p.nominal_peak_voltage(), 0.0], &p, ts);
    let moves = !c.saturated && c.int_v[0] > 0.0;
    check(
        mismatches == 0 && frozen && moves,
        format!("MPC argmin mismatches {mismatches}/1000; PI integrators frozen under saturation: {frozen}, integrate otherwise: {moves}"),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let heavy = args.iter().any(|a| a == "--ignored" || a == "--include-ignored" || a == "--heavy");
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let light: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "parameter counts", c1_param_counts),
        (2, "FLOPs, latency and compression", c2_flops_latency),
        (3, "gradient correctness", c3_gradients),
        (4, "plant fidelity", c4_plant_fidelity),
        (5, "reward suite", c5_reward_suite),
        (6, "THD oracle", c6_thd),
        (7, "distillation machinery", c7_distillation),
        (8, "trajectory-split isolation", c8_isolation),
        (11, "determinism", c11_determinism),
        (12, "baseline correctness", c12_baselines),
    ];
    let heavy_list: [(u32, &str, fn() -> Outcome); 2] =
        [(9, "training trend", c9_training_trend), (10, "case 1 controller comparison", c10_case1)];

    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut run = |n: u32, name: &str, f: fn() -> Outcome| {
        let t = Instant::now();
        let out = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    };
    for (n, name, f) in light {
        run(n, name, f);
    }
    if heavy {
        for (n, name, f) in heavy_list {
            run(n, name, f);
        }
    } else {
        for (n, name, _) in heavy_list {
            println!("criterion {n:>2} SKIP  {name}: long-running; pass --ignored to run");
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
