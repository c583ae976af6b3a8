use std::fmt::Write as _;

use super::{derive_seed, event, Ensemble, Experiment, Output, Run};
use crate::chains::{
    free_run, point_source, poisson_stabilize, region_source, uniform_active, wake_run, wired_drive_uniform,
    wired_exact_sample, bulk_window, coupling_run, ChainKind, ThresholdDetector,
};
use crate::error::{ArwError, Result};
use crate::lattice::{Configuration, Site, SiteState, Topology, TopologyKind};
use crate::rng::{below, stream_at};
use crate::stabilizer::Stabilizer;
use crate::statistics::{
    aggregate_metrics, annulus_profile, box_count, boundary_edges, covariance_map, hockey_distance,
    quadrature_check, smoothed_support, variance_curve, CorrelationAccumulator, PairCounter, SymmetryGroup,
    TestFunction, Window, SUPPORT_SMOOTHING_RADIUS,
};

type Summary = Vec<(String, String)>;

pub(super) fn dispatch(run: &Run, out: &mut Output) -> Result<Summary> {
    match run.config.experiment {
        Experiment::Aggregate => aggregate(run, out),
        Experiment::Region => region(run, out),
        Experiment::Sprinkle => sprinkle(run, out),
        Experiment::WiredSample => wired_sample(run, out),
        Experiment::Hockey => hockey(run, out),
        Experiment::Free => free(run, out),
        Experiment::Wake => wake(run, out),
        Experiment::Correlations => correlations(run, out),
        Experiment::Hyperuniformity => hyperuniformity(run, out),
        Experiment::Quadrature => quadrature(run, out),
        Experiment::Coupling => coupling(run, out),
    }
}

fn kv(key: impl Into<String>, value: impl ToString) -> (String, String) {
    (key.into(), value.to_string())
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn pm(xs: &[f64]) -> String {
    if xs.is_empty() {
        return "nan".into();
    }
    let (m, se) = mean_se(xs);
    format!("{m:.4}±{se:.4}")
}

fn require_some<T>(items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(ArwError::Domain("every replica ran out of budget".into()));
    }
    Ok(())
}

/// Snapshot of a 2-d slice through the middle of the domain.
fn snapshot(out: &mut Output, name: &str, config: &Configuration) -> Result<()> {
    let t = config.topology();
    let slice: Vec<i64> = match t.extent() {
        Some(ext) => ext.iter().skip(2).map(|&l| t.lower_corner() + (l / 2) as i64).collect(),
        None => vec![0; t.dim().saturating_sub(2)],
    };
    out.write(&format!("snapshots/{name}.pgm"), config.to_pgm(&slice)?.as_bytes())
}

fn aggregate(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let n = c.n.unwrap_or(10_000) as u32;
    let res = run.replicas(out, |r, seed| {
        let o = point_source(n, c.dim, seed, &run.dynamics)?;
        let m = aggregate_metrics(&o)?;
        let profile = c.annuli.map(|k| annulus_profile(&o, k)).transpose()?;
        Ok((m, profile, (r == 0).then_some(o.final_config)))
    })?;
    require_some(&res)?;
    let mut csv = String::from("replica,seed,n,visited,zeta_hat,inradius,outradius,sphericity\n");
    let mut ann = String::from("replica,annulus,outer_radius,density,truncated\n");
    for (r, (m, profile, _)) in &res {
        writeln!(
            csv,
            "{r},{},{},{},{},{},{},{}",
            run.seeds[*r as usize], m.particles, m.visited, m.zeta_hat, m.inradius, m.outradius, m.sphericity
        )
        .unwrap();
        if let Some(p) = profile {
            for (i, (rad, d)) in p.radii.iter().zip(&p.densities).enumerate() {
                writeln!(ann, "{r},{i},{rad},{d},{}", p.truncated).unwrap();
            }
        }
    }
    out.write("aggregate.csv", csv.as_bytes())?;
    if c.annuli.is_some() {
        out.write("annulus.csv", ann.as_bytes())?;
    }
    if let Some((_, (_, _, Some(cfg)))) = res.first() {
        snapshot(out, "aggregate_r0", cfg)?;
    }
    let z: Vec<f64> = res.iter().map(|(_, (m, ..))| m.zeta_hat).collect();
    let s: Vec<f64> = res.iter().map(|(_, (m, ..))| m.sphericity).collect();
    Ok(vec![
        kv("zeta_hat", pm(&z)),
        kv("sphericity", pm(&s)),
        kv("sphericity_min", s.iter().cloned().fold(f64::INFINITY, f64::min)),
        kv("replicas", res.len()),
    ])
}

fn region(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let region = c.region_parsed()?;
    let eps = c.eps.unwrap_or(1.0 / 16.0);
    let res = run.replicas(out, |r, seed| {
        let o = region_source(&region, eps, seed, &run.dynamics)?;
        Ok((o.initial_particles, o.visited_count(), o.moves(), (r == 0).then_some(o.final_config)))
    })?;
    require_some(&res)?;
    let mut csv = String::from("replica,seed,source_sites,visited,sleepers,moves,zeta_hat\n");
    let mut z = Vec::new();
    for (r, (n, visited, moves, _)) in &res {
        let zeta = *n as f64 / *visited as f64;
        z.push(zeta);
        writeln!(csv, "{r},{},{n},{visited},{n},{moves},{zeta}", run.seeds[*r as usize]).unwrap();
    }
    out.write("region.csv", csv.as_bytes())?;
    if let Some((_, (.., Some(cfg)))) = res.first() {
        snapshot(out, "region_r0", cfg)?;
    }
    Ok(vec![kv("source_sites", res[0].1 .0), kv("zeta_hat", pm(&z)), kv("replicas", res.len())])
}

fn sprinkle(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let side = c.side_or(64);
    let t = c.t.unwrap_or(0.5);
    let res = run.replicas(out, |r, seed| {
        let s = poisson_stabilize(side, c.dim, None, t, seed, &run.dynamics)?;
        let snap = (r == 0 && c.snapshots).then(|| s.outcome.final_config.clone());
        Ok((s.outcome.final_config.total_particles(), s.resamples, s.outcome.moves(), snap))
    })?;
    require_some(&res)?;
    let volume = (side as f64).powi(c.dim as i32);
    let mut csv = String::from("replica,seed,t,particles,density,resamples,moves\n");
    let mut dens = Vec::new();
    for (r, (p, resamples, moves, _)) in &res {
        dens.push(*p as f64 / volume);
        writeln!(csv, "{r},{},{t},{p},{},{resamples},{moves}", run.seeds[*r as usize], *p as f64 / volume).unwrap();
    }
    out.write("sprinkle.csv", csv.as_bytes())?;
    if let Some((_, (.., Some(cfg)))) = res.first() {
        snapshot(out, "sprinkle_r0", cfg)?;
    }
    Ok(vec![kv("density", pm(&dens)), kv("replicas", res.len())])
}

fn bulk_density(config: &Configuration, side: usize) -> f64 {
    let d = config.dim();
    let (lo, half) = bulk_window(side);
    box_count(config, &vec![lo; d], &vec![half; d]) as f64 / (half.max(1) as f64).powi(d as i32)
}

fn wired_sample(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let side = c.side_or(100);
    let v = Topology::wired_cube(side, c.dim)?;
    let res = run.replicas(out, |r, seed| {
        let w = wired_exact_sample(&v, seed, &run.dynamics)?;
        Ok((w.total_particles(), bulk_density(&w, side), (r == 0).then_some(w)))
    })?;
    require_some(&res)?;
    let volume = v.volume().unwrap() as f64;
    let mut csv = String::from("replica,seed,particles,density,bulk_density\n");
    let (mut dens, mut bulk) = (Vec::new(), Vec::new());
    for (r, (p, b, _)) in &res {
        dens.push(*p as f64 / volume);
        bulk.push(*b);
        writeln!(csv, "{r},{},{p},{},{b}", run.seeds[*r as usize], *p as f64 / volume).unwrap();
    }
    out.write("wired_sample.csv", csv.as_bytes())?;
    if let Some((_, (.., Some(cfg)))) = res.first() {
        snapshot(out, "wired_sample_r0", cfg)?;
    }
    Ok(vec![kv("density", pm(&dens)), kv("bulk_density", pm(&bulk)), kv("replicas", res.len())])
}

/// Grid `0, tstep, 2 tstep, ...` up to `tmax` as step counts.
fn t_grid(volume: u64, tmax: f64, tstep: f64) -> Vec<u64> {
    let points = (tmax / tstep + 1e-9).floor() as u64;
    (0..=points).map(|i| (i as f64 * tstep * volume as f64).round() as u64).collect()
}

fn hockey(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let side = c.side_or(128);
    let volume = (side as u64).pow(c.dim as u32);
    let grid = t_grid(volume, c.tmax.unwrap_or(1.2), c.tstep.unwrap_or(0.05));
    let steps = *grid.last().unwrap();
    let res = run.replicas(out, |_, seed| wired_drive_uniform(side, c.dim, steps, &grid, seed, &run.dynamics))?;
    require_some(&res)?;
    let reps = res.len() as f64;
    let mut csv = String::from("t,global_density,bulk_density\n");
    let mut curve = Vec::new();
    for (i, _) in grid.iter().enumerate() {
        let t = res[0].1[i].t;
        let g = res.iter().map(|(_, pts)| pts[i].global_density).sum::<f64>() / reps;
        let b = res.iter().map(|(_, pts)| pts[i].bulk_density).sum::<f64>() / reps;
        writeln!(csv, "{t},{g},{b}").unwrap();
        curve.push((t, g));
    }
    out.write("hockey.csv", csv.as_bytes())?;
    let fit = hockey_distance(&curve, c.zeta.unwrap_or(1.0))?;
    let mut s = vec![kv("replicas", res.len())];
    if let Some(p) = fit.plateau {
        s.push(kv("plateau", format!("{p:.4}")));
    }
    if let Some(z) = c.zeta {
        s.push(kv("hockey_distance", format!("{:.4}", fit.distance)));
        s.push(kv("zeta_c", z));
    }
    Ok(s)
}

fn free(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let side = c.side_or(64);
    let volume = (side as u64).pow(c.dim as u32);
    let steps = c.steps.unwrap_or_else(|| (c.density.unwrap_or(1.0) * volume as f64).floor() as u64);
    let function = c.threshold_parsed()?;
    let res = run.replicas(out, |r, seed| {
        // Past the threshold every addition is a long stabilization; stop there.
        let mut det = ThresholdDetector::new(function).stopping();
        let record: Vec<u64> = if r == 0 && c.snapshots { vec![steps] } else { Vec::new() };
        free_run(side, c.dim, steps, &record, Some(&mut det), seed, &run.dynamics)
    })?;
    require_some(&res)?;
    let mut csv = String::from("replica,seed,steps,tau_f,stop,total_moves\n");
    let mut trace = String::from("replica,k,moves\n");
    let mut taus = Vec::new();
    for (r, tr) in &res {
        let stop = tr.stop.as_ref().map_or(String::new(), |s| format!("{s:?}").to_lowercase());
        let tau = tr.tau_f.map_or(String::new(), |t| t.to_string());
        if let Some(t) = tr.tau_f {
            taus.push(t as f64);
        }
        if let Some(b) = &tr.halted {
            out.events.push(event(*r, b));
        }
        let total: u64 = tr.moves.iter().sum();
        writeln!(csv, "{r},{},{},{tau},{stop},{total}", run.seeds[*r as usize], tr.moves.len()).unwrap();
        for (k, m) in tr.moves.iter().enumerate() {
            writeln!(trace, "{r},{k},{m}").unwrap();
        }
    }
    out.write("free.csv", csv.as_bytes())?;
    out.write("free_moves.csv", trace.as_bytes())?;
    if let Some((_, tr)) = res.first() {
        if let Some((_, cfg)) = tr.snapshots.first() {
            snapshot(out, "free_r0", cfg)?;
        }
    }
    let mut s = vec![kv("threshold_hits", format!("{}/{}", taus.len(), res.len()))];
    if !taus.is_empty() {
        s.push(kv("tau_f", pm(&taus)));
        s.push(kv("tau_f_over_volume", pm(&taus.iter().map(|t| t / volume as f64).collect::<Vec<_>>())));
    }
    Ok(s)
}

/// Uniform start with `floor(density L^d)` particles.
fn uniform_start(topology: &Topology, density: f64, seed: u64) -> Result<Configuration> {
    let count = (density * topology.volume().unwrap() as f64).floor() as u64;
    uniform_active(topology, count, derive_seed(seed, 0, "start"))
}

fn wake(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let side = c.side_or(101);
    let steps = c.steps.unwrap_or(10);
    let record = c.record.clone().unwrap_or_else(|| vec![1, steps]);
    let r_max = c.r_max.unwrap_or(3);
    let torus = Topology::square_torus(side, 2)?;
    let density = c.density.unwrap_or(0.3);
    let res = run.replicas(out, |_, seed| {
        let init = uniform_start(&torus, density, seed)?;
        wake_run(init, steps, &record, seed, &run.dynamics)
    })?;
    let mut trace = String::from("replica,step,particles,moves,sleeps\n");
    let mut complete = Vec::new();
    for (r, tr) in res {
        for rec in &tr.records {
            writeln!(trace, "{r},{},{},{},{}", rec.step, rec.particles, rec.counters.moves, rec.counters.sleeps)
                .unwrap();
        }
        match &tr.halted {
            Some(b) => out.events.push(event(r, b)),
            None => complete.push((r, tr)),
        }
    }
    require_some(&complete)?;
    out.write("wake.csv", trace.as_bytes())?;
    let mut csv = String::from("k,dx,dy,covariance,stderr,samples\n");
    let mut s = vec![kv("replicas", complete.len())];
    for (j, &k) in record.iter().enumerate() {
        if k > steps {
            continue;
        }
        let samples: Vec<Configuration> = complete.iter().map(|(_, tr)| tr.snapshots[j].1.clone()).collect();
        let map = covariance_map(&samples, &Site::origin(2), r_max)?;
        let r = r_max as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let (v, e) = map.get(dx, dy);
                writeln!(csv, "{k},{dx},{dy},{v},{e},{}", map.samples).unwrap();
            }
        }
        let (v, e) = map.nearest_neighbor();
        s.push(kv(format!("nn_cov_k{k}"), format!("{v:.3e}±{e:.1e}")));
    }
    out.write("wake_covariance.csv", csv.as_bytes())?;
    if c.snapshots {
        if let Some((_, tr)) = complete.first() {
            if let Some((k, cfg)) = tr.snapshots.last() {
                snapshot(out, &format!("wake_r0_k{k}"), cfg)?;
            }
        }
    }
    Ok(s)
}

/// One sample of the requested ensemble.
fn ensemble_sample(run: &Run, ensemble: Ensemble, seed: u64) -> Result<Configuration> {
    let c = run.config;
    match ensemble {
        Ensemble::Free => {
            let t = Topology::square_torus(c.side_or(63), c.dim)?;
            let start = uniform_start(&t, c.density.unwrap_or(0.81), seed)?;
            let source = run.dynamics.source(seed)?;
            Ok(Stabilizer::new(run.dynamics.policy, run.dynamics.budget).stabilize(start, &source)?.final_config)
        }
        Ensemble::Wired => wired_exact_sample(&Topology::wired_cube(c.side_or(63), c.dim)?, seed, &run.dynamics),
        Ensemble::Point => Ok(point_source(c.n.unwrap_or(3215) as u32, c.dim, seed, &run.dynamics)?.final_config),
        Ensemble::Wake => {
            let t = Topology::square_torus(c.side_or(63), c.dim)?;
            let init = uniform_start(&t, c.density.unwrap_or(0.3), seed)?;
            let steps = c.steps.unwrap_or(10);
            let tr = wake_run(init, steps, &[steps], seed, &run.dynamics)?;
            match tr.halted {
                Some(b) => Err(ArwError::BudgetExceeded(b)),
                None => Ok(tr.snapshots.into_iter().next().unwrap().1),
            }
        }
    }
}

fn correlations(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let ensemble = c.ensemble.unwrap_or(Ensemble::Free);
    let r_max = c.r_max.unwrap_or(5);
    let counter = match ensemble {
        Ensemble::Free | Ensemble::Wake => {
            let t = Topology::square_torus(c.side_or(63), 2)?;
            PairCounter::new(&Configuration::empty(&t), SymmetryGroup::TorusSymmetries, r_max, None)?
        }
        Ensemble::Wired => {
            let v = Topology::wired_cube(c.side_or(63), 2)?;
            PairCounter::new(&Configuration::empty(&v), SymmetryGroup::D8, r_max, None)?
        }
        Ensemble::Point => {
            // Window of side floor(L / 2) around the origin, L being the
            // diameter of a disk holding n particles at the reference density.
            let n = c.n.unwrap_or(3215) as f64;
            let diameter = c.side.unwrap_or_else(|| {
                2 * (n / (std::f64::consts::PI * c.zeta.unwrap_or(1.0))).sqrt().ceil() as usize + 1
            });
            let half = (diameter / 2) as i64;
            let window = Window::centered(-half, diameter);
            let empty = Configuration::empty(&Topology::dynamic(2)?);
            PairCounter::new(&empty, SymmetryGroup::D8, r_max, Some(window))?
        }
    };
    let res = run.replicas(out, |_, seed| counter.count(&ensemble_sample(run, ensemble, seed)?))?;
    let mut acc = CorrelationAccumulator::new(counter);
    for (_, counts) in res {
        acc.push(counts);
    }
    let mut table = acc.finish()?;
    if let Some(z) = c.zeta {
        // Normalize with the nominal density, as in (E[1(0)1(x)] - z^2) / (z - z^2).
        let scale = (table.zeta_hat - table.zeta_hat.powi(2)) / (z - z * z);
        table.corr = table.with_zeta(z);
        table.stderr.iter_mut().for_each(|e| *e *= scale);
    }
    let mut csv = String::from("x,y,corr,stderr,samples\n");
    for (i, (x, y)) in table.offsets.iter().enumerate() {
        writeln!(csv, "{x},{y},{},{},{}", table.corr[i], table.stderr[i], table.samples).unwrap();
    }
    out.write("correlations.csv", csv.as_bytes())?;
    let mut s = vec![kv("samples", table.samples), kv("zeta_hat", format!("{:.4}", table.zeta_hat))];
    for (x, y) in [(1, 0), (1, 1), (2, 0)] {
        if let Some((v, e)) = table.get(x, y) {
            s.push(kv(format!("corr_{x}_{y}"), format!("{v:.4}±{e:.4}")));
        }
    }
    Ok(s)
}

fn hyperuniformity(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let side = c.side_or(50);
    let d = c.dim;
    let volume = (side as u64).pow(d as u32);
    let mut record = c
        .record
        .clone()
        .unwrap_or_else(|| (1..=16).map(|i| (i as f64 * 0.05 * volume as f64).floor() as u64).collect());
    record.sort_unstable();
    record.dedup();
    let last = *record.last().ok_or_else(|| ArwError::Config("record list is empty".into()))?;
    let boxes = c.boxes.clone().unwrap_or_default();
    if boxes.iter().any(|&b| b > side) {
        return Err(ArwError::Config("boxes must fit inside the torus".into()));
    }
    let mut half_shape = vec![side; d];
    half_shape[0] = side / 2;
    let origin = vec![0i64; d];
    let res = run.replicas(out, |_, seed| {
        let tr = free_run(side, d, last, &record, None, seed, &run.dynamics)?;
        if tr.snapshots.len() != record.len() {
            return Err(ArwError::Domain("free chain stopped before the last recorded step".into()));
        }
        let halves: Vec<u64> = tr.snapshots.iter().map(|(_, cfg)| box_count(cfg, &origin, &half_shape)).collect();
        let final_cfg = &tr.snapshots.last().unwrap().1;
        let in_boxes: Vec<u64> = boxes.iter().map(|&b| box_count(final_cfg, &origin, &vec![b; d])).collect();
        Ok((halves, in_boxes))
    })?;
    require_some(&res)?;
    let half_volume = half_shape.iter().product::<usize>() as f64;
    let counts: Vec<Vec<u64>> =
        (0..record.len()).map(|j| res.iter().map(|(_, (h, _))| h[j]).collect()).collect();
    let shapes = vec![half_shape.clone(); record.len()];
    let curve = variance_curve(&counts, &shapes, None)?;
    let mut csv = String::from("k,zeta,volume,mean,variance,bernoulli,ratio,replicas\n");
    let mut best = (f64::INFINITY, 0u64);
    for (p, &k) in curve.points.iter().zip(&record) {
        let zeta = k as f64 / volume as f64;
        let bern = zeta * (1.0 - zeta) * half_volume;
        let ratio = if bern > 0.0 { p.variance / bern } else { f64::NAN };
        if ratio < best.0 {
            best = (ratio, k);
        }
        writeln!(csv, "{k},{zeta},{},{},{},{bern},{ratio},{}", p.volume, p.mean, p.variance, p.replicas).unwrap();
    }
    out.write("hyperuniformity.csv", csv.as_bytes())?;
    let mut s = vec![kv("replicas", res.len()), kv("min_ratio", format!("{:.4}", best.0)), kv("k_at_min", best.1)];
    if !boxes.is_empty() {
        let counts: Vec<Vec<u64>> = (0..boxes.len()).map(|j| res.iter().map(|(_, (_, b))| b[j]).collect()).collect();
        let shapes: Vec<Vec<usize>> = boxes.iter().map(|&b| vec![b; d]).collect();
        let zeta = last as f64 / volume as f64;
        let bc = variance_curve(&counts, &shapes, Some(zeta))?;
        let mut csv = String::from("volume,mean,variance,replicas,tail\n");
        for p in &bc.points {
            writeln!(csv, "{},{},{},{},{}", p.volume, p.mean, p.variance, p.replicas, p.tail.unwrap_or(f64::NAN))
                .unwrap();
        }
        out.write("variance_boxes.csv", csv.as_bytes())?;
        if let Some(fit) = bc.fitted_alpha {
            s.push(kv("alpha", format!("{:.3}", fit.alpha)));
            s.push(kv("alpha_ci", format!("[{:.3},{:.3}]", fit.ci_low, fit.ci_high)));
        }
    }
    Ok(s)
}

fn quadrature(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let region = c.region_parsed()?;
    let eps = c.eps.unwrap_or(1.0 / 16.0);
    let res = run.replicas(out, |_, seed| region_source(&region, eps, seed, &run.dynamics))?;
    require_some(&res)?;
    let outcomes: Vec<_> = res.into_iter().map(|(_, o)| o).collect();
    let zeta_a = c.zeta.unwrap_or_else(|| {
        let n: u64 = outcomes.iter().map(|o| o.initial_particles).sum();
        let v: usize = outcomes.iter().map(|o| o.visited_count()).sum();
        n as f64 / v as f64
    });
    let support = smoothed_support(&outcomes[0].final_config, zeta_a, SUPPORT_SMOOTHING_RADIUS);
    let d = region.dim();
    let mut functions = vec![
        TestFunction::One,
        TestFunction::Affine { a: (0..d).map(|i| 1.0 / (i + 1) as f64).collect(), b: 1.0 },
    ];
    let centers = c.centers.unwrap_or(50);
    let key = derive_seed(c.seed, 0, "centers");
    for i in 0..centers as u64 {
        let x = &support[below(stream_at(key, i), support.len() as u64) as usize];
        let x0 = x.coords().iter().map(|&v| v as f64 * eps).collect();
        functions.push(TestFunction::NegSquaredDistance { x0 });
    }
    let reports = quadrature_check(&region, eps, &outcomes, zeta_a, &functions)?;
    let mut csv = String::from("function_id,lhs,rhs,margin,stderr\n");
    for r in &reports {
        writeln!(csv, "{},{},{},{},{}", r.function_id, r.lhs, r.rhs, r.margin, r.stderr).unwrap();
    }
    out.write("quadrature.csv", csv.as_bytes())?;
    let unit_bound = eps * eps.powi(d as i32 - 1) * boundary_edges(&support) as f64;
    let ok = reports[2..].iter().filter(|r| r.margin >= -3.0 * r.stderr).count();
    Ok(vec![
        kv("zeta_a", format!("{zeta_a:.4}")),
        kv("unit_margin", format!("{:.4}", reports[0].margin)),
        kv("unit_bound", format!("{unit_bound:.4}")),
        kv("centers_ok", format!("{ok}/{centers}")),
    ])
}

/// A stable state of `ensemble` and a copy with one extra sleeper at a
/// uniformly chosen empty site.
fn coupled_pair(run: &Run, ensemble: Ensemble, seed: u64) -> Result<(Configuration, Configuration)> {
    let c = run.config;
    let a = match ensemble {
        Ensemble::Wired => {
            wired_exact_sample(&Topology::wired_cube(c.side_or(16), c.dim)?, derive_seed(seed, 0, "pair"), &run.dynamics)?
        }
        _ => {
            let t = Topology::square_torus(c.side_or(16), c.dim)?;
            let start = uniform_start(&t, c.density.unwrap_or(0.5), seed)?;
            let source = run.dynamics.source(derive_seed(seed, 0, "pair"))?;
            Stabilizer::new(run.dynamics.policy, run.dynamics.budget).stabilize(start, &source)?.final_config
        }
    };
    let empty: Vec<Site> =
        a.topology().sites()?.into_iter().filter(|x| a.get(x).is_ok_and(|s| s == SiteState::EMPTY)).collect();
    if empty.is_empty() {
        return Err(ArwError::Domain("no empty site for the extra sleeper".into()));
    }
    let mut b = a.clone();
    let pick = below(stream_at(derive_seed(seed, 1, "pair"), 0), empty.len() as u64) as usize;
    b.set(&empty[pick], SiteState::SLEEPING)?;
    Ok((a, b))
}

fn coupling(run: &Run, out: &mut Output) -> Result<Summary> {
    let c = run.config;
    let ensemble = c.ensemble.unwrap_or(Ensemble::Wired);
    let kind = match ensemble {
        Ensemble::Wired => ChainKind::Wired,
        Ensemble::Free => ChainKind::Free,
        _ => ChainKind::Wake,
    };
    let volume = (c.side_or(16) as u64).pow(c.dim as u32);
    let max_steps = c.steps.unwrap_or(4 * volume);
    let res = run.replicas(out, |_, seed| {
        let (a, b) = coupled_pair(run, ensemble, seed)?;
        if a.topology().kind() == TopologyKind::Torus && kind == ChainKind::Free {
            // The free chain fills up; never run it past full occupancy.
            let room = volume - b.total_particles();
            return coupling_run(kind, a, b, seed, max_steps.min(room), &run.dynamics);
        }
        coupling_run(kind, a, b, seed, max_steps, &run.dynamics)
    })?;
    require_some(&res)?;
    let mut csv = String::from("replica,seed,coupling_time\n");
    let mut times = Vec::new();
    for (r, t) in &res {
        let text = t.map_or(String::new(), |t| t.to_string());
        if let Some(t) = t {
            times.push(*t);
        }
        writeln!(csv, "{r},{},{text}", run.seeds[*r as usize]).unwrap();
    }
    out.write("coupling.csv", csv.as_bytes())?;
    times.sort_unstable();
    let mut s = vec![kv("coupled", format!("{}/{}", times.len(), res.len())), kv("max_steps", max_steps)];
    if !times.is_empty() {
        s.push(kv("median_coupling_time", times[times.len() / 2]));
    }
    Ok(s)
}
