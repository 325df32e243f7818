//! Acceptance suite: one PASS/FAIL line per criterion, run in order.
//!
//! `cargo test --test acceptance`. Exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};

use radicalc::bank::{build_bank, build_bor_matrix, decompose_char, BoRMatrix, Charset};
use radicalc::gradcheck::{pipeline_grad_check, toy_instance, TOY_CHARS};
use radicalc::ids::{load_ids_table, parse_ids_str, serialize_ids, IdcOperator, IdsNode};
use radicalc::loss::{hybrid_loss, hybrid_loss_graph, TargetSequence};
use radicalc::metrics::{evaluate, normalize_transcript, one_minus_ned, EvalPair};
use radicalc::model::{names, Decoder, Mode};
use radicalc::tensor::{Graph, SeededRng, Tensor};
use radicalc::trainer::{summarize, Checkpoint, TrainConfig, Trainer};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn report(n: u32, name: &str, pass: bool, detail: String, took: Duration, budget: Duration) {
    let ok = pass && took <= budget;
    println!(
        "criterion {n:>2} {name:<28} {}  {detail}  [{:.3}s, budget {:.3}s]",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
    assert!(took <= budget, "criterion {n} ({name}) over budget: {took:?}");
}

/// Fastest of `reps` runs, for budgets far below scheduler noise.
fn best_of<T>(reps: usize, mut f: impl FnMut() -> T) -> (T, Duration) {
    let mut best = Duration::MAX;
    let mut out = None;
    for _ in 0..reps {
        let t = Instant::now();
        let v = f();
        best = best.min(t.elapsed());
        out = Some(v);
    }
    (out.expect("reps > 0"), best)
}

// Independent decomposition oracle: reads the table text directly.

fn han(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x323AF)
}

fn raw_table() -> BTreeMap<char, String> {
    let text = std::fs::read_to_string(fixtures().join("desk_ids.txt")).unwrap();
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let ch = fields[1].chars().next().unwrap();
        let ids: String = fields[2].chars().take_while(|&c| c != '[').collect();
        map.entry(ch).or_insert(ids);
    }
    map
}

fn oracle_bag(c: char, table: &BTreeMap<char, String>) -> BTreeSet<String> {
    fn atom(c: char, table: &BTreeMap<char, String>) -> bool {
        table.get(&c).is_none_or(|ids| *ids == c.to_string())
    }
    fn walk(c: char, table: &BTreeMap<char, String>, out: &mut BTreeSet<String>, path: &mut Vec<char>) {
        for part in table[&c].chars().filter(|&p| !('\u{2FF0}'..='\u{2FFB}').contains(&p)) {
            out.insert(part.to_string());
            if !atom(part, table) && !path.contains(&part) {
                path.push(part);
                walk(part, table, out, path);
                path.pop();
            }
        }
    }
    let mut out = BTreeSet::new();
    if atom(c, table) {
        out.insert(c.to_string());
    } else {
        walk(c, table, &mut out, &mut vec![c]);
    }
    out
}

fn criterion_01_decomposition_fidelity() {
    let table = load_ids_table(fixtures().join("desk_ids.txt")).unwrap();
    let (bag, took) = best_of(5, || decompose_char('慧', &table));
    let got: BTreeSet<String> = bag.bag.iter().map(ToString::to_string).collect();
    let want: BTreeSet<String> = "彗心丰彐三二一丨".chars().map(String::from).collect();
    report(
        1,
        "decomposition fidelity",
        got == want,
        format!("慧 -> {got:?}"),
        took,
        Duration::from_millis(1),
    );
}

fn criterion_02_bank_oracle() {
    let charset = Charset::load(fixtures().join("desk_charset.txt")).unwrap();
    let table = load_ids_table(fixtures().join("desk_ids.txt")).unwrap();
    let raw = raw_table();
    let (bank, took) = best_of(3, || build_bank(&charset, &table).unwrap());
    let oracle: BTreeSet<String> = charset
        .chars()
        .iter()
        .filter(|&&c| han(c))
        .flat_map(|&c| oracle_bag(c, &raw))
        .collect();
    let got: BTreeSet<String> = bank.radicals().iter().map(ToString::to_string).collect();
    report(
        2,
        "bank oracle equivalence",
        got == oracle && bank.len() == oracle.len(),
        format!(
            "D = {} (oracle {}) over {} chars",
            bank.len(),
            oracle.len(),
            charset.chars().len()
        ),
        took,
        Duration::from_secs(1),
    );
}

fn criterion_03_bor_matrix_structure() {
    let charset = Charset::load(fixtures().join("desk_charset.txt")).unwrap();
    let table = load_ids_table(fixtures().join("desk_ids.txt")).unwrap();
    let raw = raw_table();
    let bank = build_bank(&charset, &table).unwrap();
    let (m, took) = best_of(3, || build_bor_matrix(&charset, &bank, &table));
    let mut bad = Vec::new();
    for class in 0..charset.num_classes() {
        let want = match charset.chars().get(class) {
            Some(&c) if han(c) => oracle_bag(c, &raw).len(),
            _ => 0,
        };
        if m.row_popcount(class) != want {
            bad.push(charset.label_text(class));
        }
    }
    let zero_rows = (0..charset.num_classes()).filter(|&i| m.row_popcount(i) == 0).count();
    report(
        3,
        "BoR matrix structure",
        bad.is_empty(),
        format!("{} rows, {zero_rows} zero rows, mismatches {bad:?}", m.shape().0),
        took,
        Duration::from_secs(1),
    );
}

fn tree_strategy() -> impl Strategy<Value = IdsNode> {
    let leaf = prop_oneof![
        8 => (0x4E00u32..=0x9FFF).prop_map(|c| IdsNode::leaf(char::from_u32(c).unwrap())),
        1 => (0x2460u32..=0x2473).prop_map(|c| IdsNode::leaf(char::from_u32(c).unwrap())),
    ];
    let ops: Vec<IdcOperator> = IdcOperator::all().collect();
    leaf.prop_recursive(6, 48, 3, move |inner| {
        (
            proptest::sample::select(ops.clone()),
            proptest::collection::vec(inner, 3),
        )
            .prop_map(|(op, mut kids)| {
                kids.truncate(op.arity());
                IdsNode::Internal { op, children: kids }
            })
    })
}

fn criterion_04_ids_round_trip() {
    let start = Instant::now();
    let config = PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    };
    let rng = || TestRng::deterministic_rng(RngAlgorithm::ChaCha);
    let mut runner = TestRunner::new_with_rng(config.clone(), rng());
    let round = runner.run(&tree_strategy(), |tree| {
        let back = parse_ids_str(&serialize_ids(&tree)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(back, tree);
        Ok(())
    });
    let mut runner = TestRunner::new_with_rng(config, rng());
    let fuzz = runner.run(&any::<String>(), |s| {
        let _ = parse_ids_str(&s);
        Ok(())
    });
    report(
        4,
        "IDS round trip + fuzz",
        round.is_ok() && fuzz.is_ok(),
        format!("10000 trees {:?}, 10000 strings {:?}", round.is_ok(), fuzz.is_ok()),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

fn criterion_05_gradient_correctness() {
    let start = Instant::now();
    let r = pipeline_grad_check(7).unwrap();
    report(
        5,
        "gradient correctness",
        r.max_rel_err < 1e-4,
        format!("max rel err {:.2e} over {} entries", r.max_rel_err, r.entries_checked),
        start.elapsed(),
        Duration::from_secs(60),
    );
}

fn criterion_06_mask_semantics() {
    let start = Instant::now();
    let mut inst = toy_instance(3).unwrap();
    let charset = Charset::new(TOY_CHARS.chars()).unwrap();
    let bor = BoRMatrix::from_tensor(inst.params.value(names::BOR).unwrap());
    let targets = TargetSequence::new("AB", &charset, &bor);
    let mut g = Graph::new();
    let dec = Decoder::new(&inst.config, &inst.params);
    let steps = dec
        .forward_teacher(
            &mut g,
            &inst.image,
            &targets.classes,
            Mode::Train,
            &mut SeededRng::new(1),
        )
        .unwrap();
    let y: Vec<_> = steps.iter().map(|s| s.y_logits).collect();
    let r: Vec<_> = steps.iter().map(|s| s.radical_logits).collect();
    let nodes = hybrid_loss_graph(&mut g, &y, &r, &targets, true).unwrap();
    let l_r = g.value(nodes.l_r).item();
    inst.params.zero_grads();
    g.backward(nodes.total).write_to(&g, &mut inst.params, 1.0).unwrap();
    let rad_zero = [names::RAD_W, names::RAD_B]
        .iter()
        .all(|n| inst.params.grad(n).unwrap().data().iter().all(|&v| v == 0.0));
    let char_live = inst
        .params
        .grad(names::HEAD_W)
        .unwrap()
        .data()
        .iter()
        .any(|&v| v != 0.0);
    report(
        6,
        "mask semantics",
        l_r == 0.0 && rad_zero && char_live,
        format!("l_r = {l_r}, radical-head grads all zero: {rad_zero}"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

fn oracle_loss(y: &Tensor, r: &Tensor, tg: &TargetSequence) -> (f64, f64) {
    let t = tg.len();
    let mut l_o = 0.0;
    for i in 0..t {
        let z: f64 = y.row(i).iter().map(|v| v.exp()).sum();
        l_o += -(y.row(i)[tg.classes[i]].exp() / z).ln();
    }
    l_o /= t as f64;
    let (mut l_r, mut n) = (0.0, 0usize);
    for i in (0..t).filter(|&i| tg.mask[i] == 1) {
        n += 1;
        let row = r.row(i);
        let mut b = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let p = 1.0 / (1.0 + (-x).exp());
            let z = tg.radicals[i][j];
            b -= z * p.ln() + (1.0 - z) * (1.0 - p).ln();
        }
        l_r += b / row.len() as f64;
    }
    (l_o, if n == 0 { 0.0 } else { l_r / n as f64 })
}

fn criterion_07_hybrid_loss_identity() {
    let start = Instant::now();
    let charset = Charset::new("慧心彗丰三ABC".chars()).unwrap();
    let pool: Vec<char> = "慧心彗丰三ABC中".chars().collect();
    let mut rng = SeededRng::new(17);
    let (mut worst, mut exact) = (0.0f64, true);
    for _ in 0..1000 {
        let d = rng.range(1, 12);
        let rows = (0..charset.num_classes())
            .map(|i| (0..d).map(|_| u8::from(i < 5 && rng.bernoulli(0.4))).collect())
            .collect();
        let bor = BoRMatrix::from_rows(rows);
        let len = rng.range(1, 6);
        let word: String = (0..len).map(|_| pool[rng.below(pool.len())]).collect();
        let tg = TargetSequence::new(&word, &charset, &bor);
        let y = Tensor::uniform(&[tg.len(), charset.num_classes()], 5.0, &mut rng);
        let r = Tensor::uniform(&[tg.len(), d], 5.0, &mut rng);
        let rep = hybrid_loss(&y, &r, &tg).unwrap();
        let (l_o, l_r) = oracle_loss(&y, &r, &tg);
        exact &= rep.total == rep.l_o + rep.l_r;
        worst = worst
            .max((rep.l_o - l_o).abs())
            .max((rep.l_r - l_r).abs())
            .max((rep.total - l_o - l_r).abs());
    }
    report(
        7,
        "hybrid loss identity",
        exact && worst < 1e-12,
        format!("L == l_o + l_r on all 1000: {exact}, max oracle diff {worst:.1e}"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

fn toy_config() -> TrainConfig {
    TrainConfig::parse(&std::fs::read_to_string(fixtures().join("train_toy.conf")).unwrap()).unwrap()
}

fn criterion_08_learning_demonstration() {
    let start = Instant::now();
    let config = toy_config();
    let (charset, bor) = config.load_data(&fixtures()).unwrap();
    let cjk = charset.chars().iter().filter(|&&c| han(c)).count();
    let mut trainer = Trainer::new(config, charset, &bor.to_tensor()).unwrap();
    let records = trainer.run(&mut std::io::sink()).unwrap();
    let s = summarize(&records, 0.9);
    let (word, image) = trainer.probe_set().next().unwrap();
    let decoded = trainer
        .decoder()
        .decode_greedy(image, &trainer.charset, trainer.model.max_decode_len)
        .unwrap();
    report(
        8,
        "learning demonstration",
        cjk == 30
            && trainer.words.len() == 200
            && s.reached_target_at.is_some()
            && s.l_r_reduction >= 0.8
            && decoded == word,
        format!(
            "{cjk} chars, {} words: acc {:.3} (>= 0.9 at step {:?}), l_r -{:.1}%, decoded `{decoded}` for `{word}`",
            trainer.words.len(),
            s.final_word_acc,
            s.reached_target_at,
            100.0 * s.l_r_reduction
        ),
        start.elapsed(),
        Duration::from_secs(600),
    );
}

fn small_config() -> TrainConfig {
    TrainConfig {
        steps: 4,
        batch_size: 4,
        probe_every: 2,
        words: 20,
        d_emb: 8,
        d_hidden: 16,
        d_vis: 8,
        d_attn: 8,
        conv1_channels: 4,
        conv2_channels: 6,
        ..toy_config()
    }
}

fn criterion_09_ablation_structure() {
    let start = Instant::now();
    let flags = ["no_cvfm", "no_bce", "re_zero", "no_scaler", "no_dropout"];
    let mut runnable = Vec::new();
    for flag in flags {
        let text = format!("{}{flag} = true\n", small_config().to_text());
        let config = TrainConfig::parse(&text).unwrap();
        let (charset, bor) = config.load_data(&fixtures()).unwrap();
        let mut t = Trainer::new(config, charset, &bor.to_tensor()).unwrap();
        let recs = t.run(&mut std::io::sink()).unwrap();
        runnable.push(recs.len() == 4 && recs.iter().all(|r| r.total.is_finite()));
    }

    let config = TrainConfig {
        re_zero: true,
        ..small_config()
    };
    let (charset, bor) = config.load_data(&fixtures()).unwrap();
    let t = Trainer::new(config, charset, &bor.to_tensor()).unwrap();
    let dec = t.decoder();
    let (d_emb, d) = (t.model.d_emb, t.model.radicals);
    let mut zero_block = true;
    for y_prev in 0..t.model.classes {
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let f = dec.cvfm_fuse(&mut g, y_prev, mode, &mut SeededRng::new(5)).unwrap();
            zero_block &= g.value(f).data()[d_emb..d_emb + d].iter().all(|&v| v == 0.0);
        }
    }
    report(
        9,
        "ablation structure",
        runnable.iter().all(|&r| r) && zero_block,
        format!(
            "runnable {:?}, re-zero radical block exactly zero: {zero_block}",
            flags.iter().zip(&runnable).collect::<Vec<_>>()
        ),
        start.elapsed(),
        Duration::from_secs(60),
    );
}

fn dp_oracle(a: &[char], b: &[char]) -> usize {
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = i;
    }
    m[0] = (0..=b.len()).collect();
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = m[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            m[i][j] = sub.min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
        }
    }
    m[a.len()][b.len()]
}

fn criterion_10_metrics() {
    let start = Instant::now();
    let alphabet: Vec<char> = "ab慧心彗!".chars().collect();
    let mut rng = SeededRng::new(23);
    let mut exact = true;
    for _ in 0..1000 {
        let mut word = || -> Vec<char> {
            (0..rng.range(0, 8))
                .map(|_| alphabet[rng.below(alphabet.len())])
                .collect()
        };
        let (a, b) = (word(), word());
        let longest = a.len().max(b.len());
        let want = if longest == 0 {
            1.0
        } else {
            1.0 - dp_oracle(&a, &b) as f64 / longest as f64
        };
        let (sa, sb): (String, String) = (a.iter().collect(), b.iter().collect());
        exact &= one_minus_ned(&sa, &sb) == want;
        exact &= strsim::generic_levenshtein(&a, &b) == dp_oracle(&a, &b);
    }
    let kitten = one_minus_ned("kitten", "sitting");
    let symbols = normalize_transcript("ab!c", false) == normalize_transcript("abc", false);
    let split = evaluate(
        &[
            EvalPair::new("1", "ABC", "ABC"),
            EvalPair::new("2", "x", "慧心"),
            EvalPair::new("3", "A1", "A慧1"),
        ],
        false,
    )
    .unwrap();
    report(
        10,
        "metrics",
        exact && (kitten - (1.0 - 3.0 / 7.0)).abs() < 1e-15 && symbols && split.n_non_latin == 2,
        format!(
            "1000 pairs exact: {exact}, kitten/sitting {kitten:.4}, ab!c == abc: {symbols}, non-latin {}/3",
            split.n_non_latin
        ),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

fn criterion_11_determinism_and_resume() {
    let start = Instant::now();
    let config = TrainConfig {
        steps: 100,
        batch_size: 8,
        probe_every: 50,
        ..toy_config()
    };
    let (charset, bor) = config.load_data(&fixtures()).unwrap();
    let bor = bor.to_tensor();

    let mut a = Trainer::new(config.clone(), charset.clone(), &bor).unwrap();
    let curve_a = a.run(&mut std::io::sink()).unwrap();
    let mut b = Trainer::new(config.clone(), charset.clone(), &bor).unwrap();
    let curve_b = b.run(&mut std::io::sink()).unwrap();
    let same_curve = curve_a == curve_b;

    let mut half = Trainer::new(config, charset, &bor).unwrap();
    half.run_to(50, &mut std::io::sink()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.rdcl");
    Checkpoint::of(&half).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
    let tail = resumed.run(&mut std::io::sink()).unwrap();

    a.params.zero_grads();
    resumed.params.zero_grads();
    let same_params = a.params == resumed.params && a.adam == resumed.adam;
    let same_tail = tail[..] == curve_a[50..];
    report(
        11,
        "determinism + resume",
        same_curve && same_params && same_tail,
        format!("identical curves: {same_curve}, 50+save+load+50 == 100 (params {same_params}, losses {same_tail})"),
        start.elapsed(),
        Duration::from_secs(120),
    );
}

fn main() {
    let criteria: [(&str, fn()); 11] = [
        (
            "criterion_01_decomposition_fidelity",
            criterion_01_decomposition_fidelity,
        ),
        ("criterion_02_bank_oracle", criterion_02_bank_oracle),
        ("criterion_03_bor_matrix_structure", criterion_03_bor_matrix_structure),
        ("criterion_04_ids_round_trip", criterion_04_ids_round_trip),
        ("criterion_05_gradient_correctness", criterion_05_gradient_correctness),
        ("criterion_06_mask_semantics", criterion_06_mask_semantics),
        ("criterion_07_hybrid_loss_identity", criterion_07_hybrid_loss_identity),
        (
            "criterion_08_learning_demonstration",
            criterion_08_learning_demonstration,
        ),
        ("criterion_09_ablation_structure", criterion_09_ablation_structure),
        ("criterion_10_metrics", criterion_10_metrics),
        (
            "criterion_11_determinism_and_resume",
            criterion_11_determinism_and_resume,
        ),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        if std::panic::catch_unwind(run).is_err() {
            println!("{name}: FAIL");
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
