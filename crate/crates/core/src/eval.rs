//! Metrics, threshold sweeps and CSV/SVG emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Schema, SlotValues};
use crate::error::{DstError, Result};
use crate::heads::GateClass;
use crate::model::Model;
use crate::protodst::close_tags;
use crate::text;
use crate::tracker::{predict_dialogue, replay, ConceptDB, TrackerConfig, TurnOutcome, TurnRecord};

const N_GATES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jga: f64,
    pub per_domain_jga: BTreeMap<String, f64>,
    pub slot_gate_accuracy: f64,
    pub gate_confusion: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagging_joint_accuracy: Option<f64>,
    pub per_slot_accuracy: BTreeMap<String, f64>,
    pub turn_count: usize,
}

fn slot_matches(pred: &SlotValues, gold: &SlotValues, slot: &str) -> bool {
    let p = pred.get(slot).map(|v| text::normalize(v));
    let g = gold.get(slot).map(|v| text::normalize(v));
    p == g
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(DstError::Dimension(format!("{a} predictions for {b} gold entries")));
    }
    Ok(())
}

fn all_slots<'a>(pred: &'a SlotValues, gold: &'a SlotValues) -> impl Iterator<Item = &'a String> {
    pred.keys().chain(gold.keys())
}

/// Share of turns whose every slot matches; absent on both sides counts as a match.
pub fn joint_goal_accuracy(pred: &[SlotValues], gold: &[SlotValues]) -> Result<f64> {
    check_aligned(pred.len(), gold.len())?;
    if gold.is_empty() {
        return Err(DstError::Empty("no turns to evaluate".into()));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| all_slots(p, g).all(|s| slot_matches(p, g, s))).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// JGA restricted to `slots`.
pub fn restricted_jga(pred: &[SlotValues], gold: &[SlotValues], slots: &[&str]) -> Result<f64> {
    let project = |m: &SlotValues| -> SlotValues {
        m.iter().filter(|(k, _)| slots.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect()
    };
    let p: Vec<_> = pred.iter().map(project).collect();
    let g: Vec<_> = gold.iter().map(project).collect();
    joint_goal_accuracy(&p, &g)
}

pub fn per_slot_accuracy(pred: &[SlotValues], gold: &[SlotValues], schema: &Schema) -> Result<BTreeMap<String, f64>> {
    check_aligned(pred.len(), gold.len())?;
    if gold.is_empty() {
        return Err(DstError::Empty("no turns to evaluate".into()));
    }
    Ok(schema
        .slots
        .iter()
        .map(|s| {
            let hits = pred.iter().zip(gold).filter(|(p, g)| slot_matches(p, g, &s.name)).count();
            (s.name.clone(), hits as f64 / gold.len() as f64)
        })
        .collect())
}

/// Exact-class accuracy and confusion counts (`confusion[gold][pred]`).
pub fn slot_gate_accuracy(pred: &[GateClass], gold: &[GateClass]) -> Result<(f64, Vec<Vec<usize>>)> {
    check_aligned(pred.len(), gold.len())?;
    if gold.is_empty() {
        return Err(DstError::Empty("no gates to evaluate".into()));
    }
    let mut confusion = vec![vec![0; N_GATES]; N_GATES];
    for (p, g) in pred.iter().zip(gold) {
        confusion[g.index()][p.index()] += 1;
    }
    let hits: usize = (0..N_GATES).map(|i| confusion[i][i]).sum();
    Ok((hits as f64 / gold.len() as f64, confusion))
}

/// Gate accuracy over textual labels; unknown classes are an error.
pub fn slot_gate_accuracy_labels<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<(f64, Vec<Vec<usize>>)> {
    let parse = |v: &[S]| v.iter().map(|s| s.as_ref().parse::<GateClass>()).collect::<Result<Vec<_>>>();
    slot_gate_accuracy(&parse(pred)?, &parse(gold)?)
}

/// One turn-slot tagging case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagCase {
    pub slot: String,
    pub predicted: Vec<bool>,
    pub gold: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggingAccuracy {
    pub overall: f64,
    pub per_slot: BTreeMap<String, f64>,
}

/// Share of turn-slots whose every token label matches.
pub fn tagging_joint_accuracy(cases: &[TagCase]) -> Result<TaggingAccuracy> {
    if cases.is_empty() {
        return Err(DstError::Empty("no tagging cases".into()));
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for c in cases {
        check_aligned(c.predicted.len(), c.gold.len())?;
        let ok = c.predicted == c.gold;
        hits += ok as usize;
        let e = per.entry(c.slot.clone()).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    Ok(TaggingAccuracy {
        overall: hits as f64 / cases.len() as f64,
        per_slot: per.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
    })
}

/// A tagging case before thresholding: normalized word-position weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedTagCase {
    pub slot: String,
    pub weights: Vec<f64>,
    pub gold: Vec<bool>,
}

pub fn nu_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// Tagging joint accuracy after closing at each `ν` of the grid.
pub fn nu_sweep(cases: &[WeightedTagCase], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&nu| {
            let closed: Vec<TagCase> = cases
                .iter()
                .map(|c| TagCase { slot: c.slot.clone(), predicted: close_tags(&c.weights, nu), gold: c.gold.clone() })
                .collect();
            Ok((nu, tagging_joint_accuracy(&closed)?.overall))
        })
        .collect()
}

/// Metrics of tracked records against the corpus labels.
pub fn report(corpus: &[Dialogue], records: &[Vec<TurnRecord>], schema: &Schema) -> Result<EvalReport> {
    check_aligned(records.len(), corpus.len())?;
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut pg = Vec::new();
    let mut gg = Vec::new();
    for (d, recs) in corpus.iter().zip(records) {
        check_aligned(recs.len(), d.turns.len())?;
        for (turn, rec) in d.turns.iter().zip(recs) {
            pred.push(rec.state.assignments.clone());
            gold.push(turn.state.clone());
            if turn.gate_labels.is_some() {
                for slot in &schema.slots {
                    pg.push(rec.gates.get(&slot.name).copied().unwrap_or(GateClass::None));
                    gg.push(turn.gate(&slot.name).unwrap_or(GateClass::None));
                }
            }
        }
    }
    let mut per_domain_jga = BTreeMap::new();
    for dom in &schema.domains {
        let slots: Vec<&str> = schema.slots_of_domain(dom).map(|s| s.name.as_str()).collect();
        per_domain_jga.insert(dom.clone(), restricted_jga(&pred, &gold, &slots)?);
    }
    let (slot_gate_accuracy, gate_confusion) = if gg.is_empty() {
        (0.0, vec![vec![0; N_GATES]; N_GATES])
    } else {
        slot_gate_accuracy(&pg, &gg)?
    };
    Ok(EvalReport {
        jga: joint_goal_accuracy(&pred, &gold)?,
        per_domain_jga,
        slot_gate_accuracy,
        gate_confusion,
        tagging_joint_accuracy: None,
        per_slot_accuracy: per_slot_accuracy(&pred, &gold, schema)?,
        turn_count: gold.len(),
    })
}

/// Model outputs for a whole corpus, reusable across tracker settings.
pub struct CorpusPredictions {
    pub outcomes: Vec<Vec<TurnOutcome>>,
}

impl CorpusPredictions {
    pub fn compute(model: &Model, db: &ConceptDB, corpus: &[Dialogue]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(DstError::Empty("evaluation corpus has no dialogues".into()));
        }
        let outcomes = corpus.iter().map(|d| predict_dialogue(model, db, d)).collect::<Result<Vec<_>>>()?;
        Ok(CorpusPredictions { outcomes })
    }

    pub fn track(&self, corpus: &[Dialogue], schema: &Schema, db: &ConceptDB, cfg: &TrackerConfig) -> Result<Vec<Vec<TurnRecord>>> {
        corpus.iter().zip(&self.outcomes).map(|(d, o)| replay(d, o, schema, &db.values, cfg)).collect()
    }

    pub fn evaluate(&self, corpus: &[Dialogue], schema: &Schema, db: &ConceptDB, cfg: &TrackerConfig) -> Result<EvalReport> {
        report(corpus, &self.track(corpus, schema, db, cfg)?, schema)
    }
}

pub fn evaluate(model: &Model, db: &ConceptDB, corpus: &[Dialogue], schema: &Schema, cfg: &TrackerConfig) -> Result<EvalReport> {
    CorpusPredictions::compute(model, db, corpus)?.evaluate(corpus, schema, db, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSweep {
    pub best_tau: f64,
    pub curve: Vec<(f64, f64)>,
}

/// The 0.1-spaced grid from 1.0 down to 0.0.
pub fn tau_grid() -> Vec<f64> {
    (0..=10).rev().map(|i| i as f64 / 10.0).collect()
}

/// Dev JGA for each `τ`; the best one wins, ties going to the larger `τ`.
pub fn sweep_tau(preds: &CorpusPredictions, dev: &[Dialogue], schema: &Schema, db: &ConceptDB, base: &TrackerConfig, grid: &[f64]) -> Result<TauSweep> {
    if dev.is_empty() {
        return Err(DstError::Empty("development split has no dialogues".into()));
    }
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(DstError::Config("tau grid must be a non-empty subset of [0, 1]".into()));
    }
    let curve = grid
        .iter()
        .map(|&tau| Ok((tau, preds.evaluate(dev, schema, db, &TrackerConfig { tau, ..*base })?.jga)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = curve[0];
    for &(tau, jga) in &curve[1..] {
        if jga > best.1 || (jga == best.1 && tau > best.0) {
            best = (tau, jga);
        }
    }
    Ok(TauSweep { best_tau: best.0, curve })
}

pub fn curve_csv(x: &str, y: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("{x},{y}\n");
    for (a, b) in points {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

/// A minimal line plot as standalone SVG.
pub fn curve_svg(title: &str, x: &str, y: &str, points: &[(f64, f64)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let (x0, x1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 0.5, x0 + 0.5) };
    let px = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |v: f64| h - m - v.clamp(0.0, 1.0) * (h - 2.0 * m);
    let path: Vec<String> = points.iter().map(|&(a, b)| format!("{:.1},{:.1}", px(a), py(b))).collect();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>", w / 2.0);
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m);
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x}</text>", w / 2.0, h - 10.0);
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{y}</text>", h / 2.0, h / 2.0);
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
    for &(a, b) in points {
        let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/>", px(a), py(b));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| DstError::io(path, e))
}

/// Writes `<stem>.csv` and `<stem>.svg` next to each other.
pub fn write_curve(dir: &Path, stem: &str, title: &str, x: &str, y: &str, points: &[(f64, f64)]) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &curve_csv(x, y, points))?;
    write_text(&dir.join(format!("{stem}.svg")), &curve_svg(title, x, y, points))
}

/// Flat CSV of the scalar metrics.
pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "jga,{}", r.jga);
    let _ = writeln!(s, "slot_gate_accuracy,{}", r.slot_gate_accuracy);
    if let Some(t) = r.tagging_joint_accuracy {
        let _ = writeln!(s, "tagging_joint_accuracy,{t}");
    }
    let _ = writeln!(s, "turn_count,{}", r.turn_count);
    for (d, v) in &r.per_domain_jga {
        let _ = writeln!(s, "jga[{d}],{v}");
    }
    for (k, v) in &r.per_slot_accuracy {
        let _ = writeln!(s, "accuracy[{k}],{v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(pairs: &[(&str, &str)]) -> SlotValues {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn jga_counts_whole_turns() {
        let gold = vec![sv(&[("a", "x")]), sv(&[("a", "x"), ("b", "y")]), sv(&[]), sv(&[("b", "z")])];
        assert_eq!(joint_goal_accuracy(&gold, &gold).unwrap(), 1.0);
        let mut pred = gold.clone();
        pred[1].insert("b".into(), "w".into());
        assert_eq!(joint_goal_accuracy(&pred, &gold).unwrap(), 0.75);
        let empty = vec![sv(&[]); 3];
        assert_eq!(joint_goal_accuracy(&empty, &empty).unwrap(), 1.0);
        assert!(joint_goal_accuracy(&empty, &gold).is_err());
    }

    #[test]
    fn extra_predicted_slot_breaks_the_turn() {
        let gold = vec![sv(&[("a", "x")])];
        let pred = vec![sv(&[("a", "x"), ("b", "y")])];
        assert_eq!(joint_goal_accuracy(&pred, &gold).unwrap(), 0.0);
        assert_eq!(restricted_jga(&pred, &gold, &["a"]).unwrap(), 1.0);
    }

    #[test]
    fn tagging_accuracy_counts_exact_matches() {
        let good = TagCase { slot: "s".into(), predicted: vec![true, false], gold: vec![true, false] };
        let mut cases = vec![good.clone(); 10];
        cases[3].predicted[1] = true;
        let acc = tagging_joint_accuracy(&cases).unwrap();
        assert!((acc.overall - 0.9).abs() < 1e-12);
        let bad = TagCase { slot: "s".into(), predicted: vec![true], gold: vec![true, false] };
        assert!(tagging_joint_accuracy(&[bad]).is_err());
    }

    #[test]
    fn nu_sweep_has_ten_rows() {
        let cases = vec![WeightedTagCase { slot: "s".into(), weights: vec![0.9, 0.1, 0.0], gold: vec![true, false, false] }];
        let curve = nu_sweep(&cases, &nu_grid()).unwrap();
        assert_eq!(curve.len(), 10);
        assert_eq!(curve[0].0, 0.0);
    }

    #[test]
    fn gate_accuracy_and_confusion() {
        use GateClass::*;
        let gold = vec![None, Span, None, Span];
        let (acc, conf) = slot_gate_accuracy(&gold, &gold).unwrap();
        assert_eq!(acc, 1.0);
        for (i, row) in conf.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert!(i == j || c == 0);
            }
        }
        let (acc, conf) = slot_gate_accuracy(&[None; 4], &gold).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(conf[Span.index()].iter().sum::<usize>(), 2);
        assert_eq!(conf[None.index()].iter().sum::<usize>(), 2);
        assert!(slot_gate_accuracy_labels(&["none", "maybe"], &["none", "span"]).is_err());
    }

    #[test]
    fn tau_grid_runs_from_one_down() {
        let g = tau_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 1.0);
        assert_eq!(*g.last().unwrap(), 0.0);
    }

    #[test]
    fn svg_contains_every_point() {
        let pts = [(0.0, 0.5), (0.5, 0.8), (1.0, 0.2)];
        let svg = curve_svg("t", "x", "y", &pts);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(curve_csv("nu", "acc", &pts).starts_with("nu,acc\n0,0.5\n"));
    }
}
