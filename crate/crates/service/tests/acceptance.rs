//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use craftloop::agent::{Agent, AgentConfig, TaskParams, TaskStatus};
use craftloop::dsl::{delinearize, examples, linearize, parse_lf_json, Action, ActionType, LogicalForm};
use craftloop::grammar::GeneratorGrammar;
use craftloop::parser::{Pair, ParserModel};
use craftloop::pipeline::{funnel_stats, honest_pool, run_loop, IterationReport, LoopConfig, ReportRow};
use craftloop::routing::Terminal;
use craftloop::session::{session_world, CommandRecord};
use craftloop::vision::model::{Geometry, Target};
use craftloop::vision::scene::{bootstrap, held_out, SceneConfig};
use craftloop::vision::shapes::{gen_shape, Shape, ShapeKind, ShapeSpec};
use craftloop::vision::text::bag_of_tokens;
use craftloop::vision::train::{train_seg, Optimizer, TrainConfig};
use craftloop::vision::{iou, SegConfig, SegMask, SegModel, VisionExample};
use craftloop::world::{BlockId, Dims, Palette, Pos, VoxelGrid, WorldDelta};

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn record(text: String, terminal: Terminal, valid: bool, annotation: Option<LogicalForm>) -> CommandRecord {
    CommandRecord {
        session_id: "fixture".into(),
        worker_id: "w".into(),
        iteration: 1,
        text,
        parse: Some(examples::build_a_box()),
        outcome: String::new(),
        terminal: Some(terminal),
        valid: Some(valid),
        annotation,
        vision_uses: Vec::new(),
        failed: false,
    }
}

fn funnel_fixture() -> Verdict {
    let t = Instant::now();
    let (right, wrong) = (examples::build_a_box(), examples::dig_moat_around_fort());
    let mut records = Vec::new();
    for i in 0..18163usize {
        let terminal = match i {
            _ if i < 2559 => Terminal::NluError,
            _ if i < 7461 => [Terminal::VisionError, Terminal::OtherError][i % 2],
            _ => Terminal::NoError,
        };
        let annotation = match i {
            _ if i < 2138 => Some(wrong.clone()),
            _ if i < 2403 => Some(right.clone()),
            // Wrong parses nobody marked as NLU errors.
            _ if (2559..2559 + 2806).contains(&i) => Some(wrong.clone()),
            _ => None,
        };
        records.push(record(format!("command {i}"), terminal, true, annotation));
    }
    // 3000 repeats in other casing and 1522 invalid commands.
    for i in 0..3000 {
        records.push(record(format!("COMMAND  {}", i * 6), Terminal::NluError, true, None));
    }
    for i in 0..1522 {
        records.push(record(format!("not a command {i}"), Terminal::NluError, false, Some(wrong.clone())));
    }
    let f = funnel_stats(&records);
    let elapsed = t.elapsed();
    let counts = f.counts();
    ensure(counts == [22685, 18163, 7461, 2559, 2403, 2138, 4944], format!("counts {counts:?}"))?;
    let (p, r) = (f.precision.ok_or("no precision")?, f.recall_estimate.ok_or("no recall")?);
    ensure((p - 0.8897).abs() <= 5e-4, format!("precision {p:.4}"))?;
    ensure((r - 0.4324).abs() <= 5e-4, format!("recall {r:.4}"))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("precision {p:.4}, recall {r:.4}"))
}

/// The three commands and logical forms as printed, with the dialogue type
/// those listings leave implicit.
const PRINTED: [(&str, &str); 3] = [
    (
        "build a box",
        r#"{"dialogue_type": "HUMAN_GIVE_COMMAND", "action_sequence": [{"action_type": "BUILD",
            "schematic": {"filters": {"where_clause": {"AND": [{"pred_text": "has_name", "obj_text": [0, [2, 2]]}]}}}}]}"#,
    ),
    (
        "move to the left of the cube",
        r#"{"dialogue_type": "HUMAN_GIVE_COMMAND", "action_sequence": [{"action_type": "MOVE",
            "location": {"relative_direction": "LEFT", "reference_object": {"filters": {"where_clause": {
              "AND": [{"pred_text": "has_name", "obj_text": [0, [6, 6]]}]}}}}}]}"#,
    ),
    (
        "dig a moat around the fort",
        r#"{"dialogue_type": "HUMAN_GIVE_COMMAND", "action_sequence": [{"action_type": "DIG",
            "location": {"relative_direction": "AROUND", "reference_object": {"filters": {"where_clause": {
              "AND": [{"pred_text": "has_name", "obj_text": [0, [5, 5]]}]}}}},
            "schematic": {"filters": {"where_clause": {"AND": [{"pred_text": "has_name", "obj_text": [0, [2, 2]]}]}}}}]}"#,
    ),
];

fn printed_parses() -> Verdict {
    let pairs: Vec<Pair> = PRINTED.iter().map(|(text, json)| parse_lf_json(json).map(|lf| Pair::new(*text, lf))).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let mut with_grammar = GeneratorGrammar::default().enumerate(0);
    with_grammar.extend(pairs.iter().cloned());
    for data in [&pairs, &with_grammar] {
        let model = ParserModel::new().train(data, 0).map_err(|e| e.to_string())?;
        for p in &pairs {
            let got = model.parse(&p.text, 0).map_err(|e| format!("{}: {e}", p.text))?;
            ensure(got.canonical() == p.lf.canonical(), format!("{}: got {}", p.text, got.canonical()))?;
        }
    }
    Ok("3/3 exact, alone and among the seed grammar".into())
}

fn linearization() -> Verdict {
    let pairs = GeneratorGrammar::default().generate(1000, u32::MAX, 99);
    let t = Instant::now();
    let mut exact = 0;
    for p in &pairs {
        if delinearize(&linearize(&p.lf)).as_ref() == Ok(&p.lf) {
            exact += 1;
        }
    }
    let elapsed = t.elapsed();
    ensure(exact == 1000, format!("{exact}/1000 recovered"))?;
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!("1000/1000 in {:.3}s", elapsed.as_secs_f64()))
}

/// Average ranks, 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            out[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    out
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn acc(r: &IterationReport, model: &str, set: &str) -> Result<f64, String> {
    r.accuracy(model, set).ok_or_else(|| format!("iteration {}: no {model} {set} row", r.iteration))
}

fn t_all(rows: &[ReportRow], iteration: u32, model: &str) -> Result<f64, String> {
    rows.iter().find(|r| r.iteration == iteration && r.model == model).map(|r| r.accuracy).ok_or_else(|| format!("no {model} T_all row"))
}

fn loop_properties() -> Verdict {
    let t = Instant::now();
    let config = LoopConfig::default();
    let out = run_loop(&config, honest_pool(10, config.seed), 10, None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let mut baseline_tn = Vec::new();
    for r in &out.reports {
        let (b, e) = (acc(r, "baseline", "T_n")?, acc(r, "episode", "T_n")?);
        ensure(e >= b, format!("(a) iteration {}: episode {e:.3} < baseline {b:.3} on T_n", r.iteration))?;
        baseline_tn.push(b);
        if r.iteration > 1 {
            let (b0, e0, r0) = (acc(r, "baseline", "T_0")?, acc(r, "episode", "T_0")?, acc(r, "rebiased", "T_0")?);
            ensure(e0 <= b0, format!("(c) iteration {}: episode {e0:.3} > baseline {b0:.3} on T_0", r.iteration))?;
            ensure((r0 - b0).abs() <= 0.02, format!("(c) iteration {}: rebiased {r0:.3} vs baseline {b0:.3} on T_0", r.iteration))?;
        }
    }
    let last = out.reports.last().ok_or("no iterations")?;
    let gap = acc(last, "episode", "T_n")? - acc(last, "baseline", "T_n")?;
    ensure(gap >= 0.10, format!("(a) final gap {gap:.3}"))?;
    let ns: Vec<f64> = (1..=baseline_tn.len()).map(|n| n as f64).collect();
    let rho = spearman(&ns, &baseline_tn);
    ensure(rho < 0.0, format!("(b) spearman {rho:.3}"))?;
    let (rb, bb) = (t_all(&out.t_all, last.iteration, "rebiased")?, t_all(&out.t_all, 0, "baseline")?);
    ensure(rb > bb, format!("(c) rebiased {rb:.3} <= baseline {bb:.3} on T_all"))?;
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!("(a) final gap {gap:.3}; (b) spearman {rho:.3}; (c) T_all rebiased {rb:.3} vs baseline {bb:.3}; {:.1}s", elapsed.as_secs_f64()))
}

fn small_scene(dims: Dims) -> (VoxelGrid, Vec<Pos>, Vec<Pos>) {
    let palette = Palette::default();
    let mut grid = VoxelGrid::flat(dims, Palette::GROUND);
    let (red, blue) = (palette.by_color("red").unwrap(), palette.by_color("blue").unwrap());
    let mut cube = Vec::new();
    for (x, y, z) in (1..3).flat_map(|x| (1..3).flat_map(move |y| (1..3).map(move |z| (x, y, z)))) {
        grid.place_block(Pos::new(x, y, z), red).unwrap();
        cube.push(Pos::new(x, y, z));
    }
    let column: Vec<Pos> = (1..4).map(|y| Pos::new(dims.width - 2, y, dims.length - 2)).collect();
    for &p in &column {
        grid.place_block(p, blue).unwrap();
    }
    (grid, cube, column)
}

fn gradient_check() -> Result<f64, String> {
    let dims = Dims::new(6, 6, 6);
    let (grid, cube, column) = small_scene(dims);
    let config = SegConfig { hidden: 4, layers: 2, hash_dim: 16, ..SegConfig::default() };
    let model = SegModel::init(config, 11);
    let enc = model.encode(&grid).map_err(|e| e.to_string())?;
    let target = |text: &str, mask: &[Pos]| Target { bag: bag_of_tokens(text, 16), y: enc.solid.iter().map(|&i| f64::from(u8::from(mask.contains(&enc.dims.pos_of(i))))).collect() };
    let targets = [target("the red cube", &cube), target("blue column", &column), target("green sphere", &[])];
    let geom = Geometry::new(dims);
    let rows: Vec<usize> = (0..enc.dims.volume()).filter(|&i| enc.ids[i] != 0).collect();
    let mut analytic = vec![0.0; model.n_params()];
    model.loss_and_grad(&geom, &enc, &rows, &targets, 3.0, 1.0, Some(&mut analytic));
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.n_params() {
        let v = probe.theta[i];
        probe.theta[i] = v + h;
        let up = probe.loss_and_grad(&geom, &enc, &rows, &targets, 3.0, 1.0, None);
        probe.theta[i] = v - h;
        let down = probe.loss_and_grad(&geom, &enc, &rows, &targets, 3.0, 1.0, None);
        probe.theta[i] = v;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

fn vision_numerics() -> Verdict {
    let t = Instant::now();
    let worst = gradient_check()?;
    ensure(worst < 1e-4, format!("gradient relative error {worst:e}"))?;

    let (grid, cube, _) = small_scene(Dims::new(8, 8, 8));
    let truth: SegMask = cube.iter().copied().collect();
    let ex = VisionExample { grid: grid.clone(), text: "red cube".into(), mask: truth.clone(), tranche_id: 0 };
    let overfit = TrainConfig { epochs: 2000, lr: 0.01, optimizer: Optimizer::Adam { batch_scenes: 1 }, augment: false, ..TrainConfig::default() };
    let (model, _) = train_seg(SegModel::init(SegConfig::default(), 1), &[ex], &overfit);
    let single = iou(&model.predict_mask(&grid, "red cube").map_err(|e| e.to_string())?, &truth);
    ensure(single == 1.0, format!("single-example IoU {single}"))?;

    let scenes = SceneConfig::default();
    let data = bootstrap(&scenes, 200, 1);
    let (pos, neg) = held_out(&scenes, 50, 2);
    let (model, _) = train_seg(SegModel::init(SegConfig::default(), 3), &data, &TrainConfig::default());
    let mut total = 0.0;
    for e in &pos {
        total += iou(&model.predict_mask(&e.grid, &e.text).map_err(|e| e.to_string())?, &e.mask);
    }
    let mean = total / pos.len() as f64;
    let empty = neg.iter().filter(|e| model.predict_mask(&e.grid, &e.text).is_ok_and(|m| m.is_empty())).count();
    let rate = empty as f64 / neg.len() as f64;
    let elapsed = t.elapsed();
    ensure(mean >= 0.9, format!("held-out IoU {mean:.4}"))?;
    ensure(rate >= 0.95, format!("empty-mask rate {rate:.2}"))?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!("grad err {worst:.1e}; overfit IoU 1.0; held-out IoU {mean:.4}, empty {empty}/{}; {:.0}s", neg.len(), elapsed.as_secs_f64()))
}

/// Membership by closed-form conditions on the offset from the anchor.
fn inside(shape: &Shape, d: (i32, i32, i32)) -> bool {
    let (x, y, z) = d;
    let in_span = |v: i32, e: u32| (-(e as i32 / 2)..e as i32 - e as i32 / 2).contains(&v);
    let up = |v: i32, e: u32| (0..e as i32).contains(&v);
    match *shape {
        Shape::Cube { side } => in_span(x, side) && in_span(y, side) && in_span(z, side),
        Shape::Rectanguloid { width, height, length } => in_span(x, width) && in_span(y, height) && in_span(z, length),
        Shape::Sphere { radius } => x * x + y * y + z * z <= (radius * radius) as i32,
        Shape::Pyramid { height } => up(y, height) && x.abs().max(z.abs()) <= height as i32 - 1 - y,
        Shape::Square { side } => z == 0 && in_span(x, side) && up(y, side),
        Shape::Rectangle { width, height } => z == 0 && in_span(x, width) && up(y, height),
        Shape::Circle { radius } => z == 0 && x * x + (y - radius as i32).pow(2) <= (radius * radius) as i32,
        Shape::Triangle { height } => z == 0 && up(y, height) && x.abs() <= height as i32 - 1 - y,
        Shape::Dome { radius } => y >= 0 && x * x + y * y + z * z <= (radius * radius) as i32,
        Shape::Arch { half_span: s } => {
            let s = s as i32;
            z == 0 && ((x.abs() == s && (0..=s).contains(&y)) || (y == s + 1 && x.abs() <= s))
        }
    }
}

fn brute_force(shape: &Shape, c: Pos) -> BTreeSet<Pos> {
    let r = 14;
    let mut out = BTreeSet::new();
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                if inside(shape, (x, y, z)) {
                    out.insert(c.offset(x, y, z));
                }
            }
        }
    }
    out
}

fn geometry() -> Verdict {
    let dims = Dims::new(32, 32, 32);
    let c = Pos::new(16, 16, 16);
    let spec = |shape| ShapeSpec { shape, center: c, material: BlockId(3) };
    let generated = |shape| gen_shape(&spec(shape), dims).map(|v| v.into_iter().collect::<BTreeSet<_>>()).map_err(|e| e.to_string());
    let lattice = [1, 7, 33, 123, 257, 515];
    for r in 0..=5u32 {
        let shape = Shape::Sphere { radius: r };
        let got = generated(shape)?;
        ensure(got == brute_force(&shape, c), format!("sphere r={r} differs from enumeration"))?;
        ensure(got.len() == lattice[r as usize], format!("sphere r={r} has {} voxels", got.len()))?;
    }
    let mut kinds = BTreeSet::new();
    let mut checked = 0;
    for a in [1u32, 3, 5] {
        let shapes = [
            Shape::Cube { side: a },
            Shape::Rectanguloid { width: a, height: a + 1, length: a + 2 },
            Shape::Sphere { radius: a },
            Shape::Pyramid { height: a },
            Shape::Square { side: a },
            Shape::Rectangle { width: a + 1, height: a },
            Shape::Circle { radius: a },
            Shape::Triangle { height: a },
            Shape::Dome { radius: a },
            Shape::Arch { half_span: a },
        ];
        for shape in shapes {
            kinds.insert(shape.kind());
            let got = generated(shape)?;
            let want = brute_force(&shape, c);
            ensure(got == want, format!("{shape:?}: {} voxels, enumeration has {}", got.len(), want.len()))?;
            checked += 1;
        }
    }
    ensure(kinds.len() == ShapeKind::ALL.len(), "not every kind covered")?;
    ensure(generated(Shape::Sphere { radius: 1 })?.len() == 7, "unit sphere")?;
    Ok(format!("6 spheres and {checked} shapes over {} kinds match enumeration", kinds.len()))
}

fn say(agent: &mut Agent, text: &str, lf: &LogicalForm) {
    let idx = agent.hear(text);
    let mut lf = lf.clone();
    lf.visit_spans_mut(|s| s.text_index = idx);
    agent.handle(&lf);
}

/// Runs the queue, returning the grid before the latest task that changed
/// it (or `prev` if none did). Undo tasks reset it to `None`.
fn drain(agent: &mut Agent, mut prev: Option<VoxelGrid>) -> Option<VoxelGrid> {
    let mut pre = agent.world.grid.clone();
    let mut ticks = 0;
    while let Some(head) = agent.queue.front() {
        let is_undo = matches!(head.params, TaskParams::Undo);
        if ticks == 2000 {
            agent.stop();
            if !is_undo && agent.world.grid != pre {
                prev = Some(pre);
            }
            return prev;
        }
        if head.progress == 0 && head.status == TaskStatus::Queued {
            pre = agent.world.grid.clone();
        }
        let (failures, len) = (agent.failures, agent.queue.len());
        agent.tick();
        ticks += 1;
        if agent.queue.len() < len {
            let finished = agent.failures == failures;
            if is_undo {
                if finished {
                    prev = None;
                }
            } else if finished || agent.world.grid != pre {
                prev = Some(pre.clone());
            }
        }
    }
    prev
}

fn random_delta(grid: &VoxelGrid, rng: &mut impl Rng) -> WorldDelta {
    let dims = grid.dims();
    let mut delta = WorldDelta::default();
    let mut used = BTreeSet::new();
    for _ in 0..rng.random_range(1..12) {
        let p = Pos::new(rng.random_range(0..dims.width), rng.random_range(0..dims.height), rng.random_range(0..dims.length));
        if used.insert(p) {
            delta.extend(WorldDelta::single(p, grid.get(p), BlockId(rng.random_range(0..=8))));
        }
    }
    delta
}

fn reversibility() -> Verdict {
    let grammar = GeneratorGrammar::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let undo = LogicalForm::command(vec![Action::bare(ActionType::Undo)]);
    let (mut restored, mut nothing) = (0, 0);
    for case in 0..500u64 {
        let mut agent = Agent::new(session_world(case).0, AgentConfig::default(), None);
        let mut expected = None;
        for _ in 0..rng.random_range(1..=5) {
            let pair = grammar.sample(u32::MAX, &mut rng);
            say(&mut agent, &pair.text, &pair.lf);
            while agent.pending.is_some() {
                agent.answer_clarification(rng.random_bool(0.5)).map_err(|e| e.to_string())?;
            }
            expected = drain(&mut agent, expected);
        }
        let before = agent.world.grid.clone();
        say(&mut agent, "undo", &undo);
        drain(&mut agent, None);
        match expected {
            Some(pre) => {
                ensure(agent.world.grid == pre, format!("case {case}: undo did not restore the pre-task world"))?;
                restored += 1;
            }
            None => {
                ensure(agent.world.grid == before, format!("case {case}: undo with nothing to undo changed the world"))?;
                nothing += 1;
            }
        }
    }
    let mut laws = 0;
    for case in 0..1000u64 {
        let base = session_world(case).0.grid;
        let delta = random_delta(&base, &mut rng);
        let mut g = base.clone();
        g.apply_delta(&delta).map_err(|e| format!("delta {case}: {e}"))?;
        let mut back = g.clone();
        back.revert_delta(&delta).map_err(|e| format!("delta {case}: {e}"))?;
        ensure(back == base, format!("delta {case}: revert(apply(d)) != id"))?;
        // Composition: applying d1 then d2 equals applying their concatenation.
        let d2 = random_delta(&g, &mut rng);
        let mut step = g.clone();
        step.apply_delta(&d2).map_err(|e| e.to_string())?;
        let mut both = delta.clone();
        both.extend(d2);
        let mut once = base.clone();
        once.apply_delta(&both).map_err(|e| e.to_string())?;
        ensure(step == once, format!("delta {case}: composition"))?;
        laws += 1;
    }
    Ok(format!("{restored} restored, {nothing} with nothing to undo; {laws} delta cases"))
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_craftloop"))
            .args(["run-loop", "--iterations", "10", "--seed", "7", "--out"])
            .arg(&dir)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).to_string())?;
        runs.push(files(&dir));
    }
    ensure(runs[0].len() > 10, "too few output files")?;
    let differing: Vec<_> = runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| a.0.display().to_string()).collect();
    ensure(runs[0].len() == runs[1].len() && differing.is_empty(), format!("differ: {differing:?}"))?;
    let bytes: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!("{} files, {bytes} bytes identical", runs[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("funnel fixture", funnel_fixture),
        ("printed parses", printed_parses),
        ("linearization round trip", linearization),
        ("loop properties", loop_properties),
        ("vision numerics", vision_numerics),
        ("geometry oracles", geometry),
        ("reversibility", reversibility),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let verdict = check();
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
