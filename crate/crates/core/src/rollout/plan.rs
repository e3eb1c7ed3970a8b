use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::RolloutError;

/// One prediction: the examples shown in context, the question condition
/// and the frame it predicts. `(in, out)` indices always differ by `stride`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub example_pairs: Vec<(usize, usize)>,
    pub question_in: usize,
    pub question_out: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutPlan {
    /// Frame indices available before the first step.
    pub given: Vec<usize>,
    pub steps: Vec<PlanStep>,
    pub covered: BTreeSet<usize>,
    /// Targets no step can reach.
    pub gaps: BTreeSet<usize>,
}

impl RolloutPlan {
    fn new(given: Vec<usize>) -> Self {
        Self {
            given,
            ..Self::default()
        }
    }

    fn push(&mut self, example_pairs: Vec<(usize, usize)>, question_in: usize, question_out: usize) {
        self.covered.insert(question_out);
        self.steps.push(PlanStep {
            example_pairs,
            question_in,
            stride: question_out - question_in,
            question_out,
        });
    }
}

fn tile_truncate<T: Clone>(items: &[T], d: usize) -> Vec<T> {
    let reps = d.div_ceil(items.len());
    items.iter().cloned().cycle().take(items.len() * reps).take(d).collect()
}

/// Fixed examples `(0,1)..(D−1,D)`; frame `i ∈ [R, T)` is predicted from
/// frame `i−1`.
pub fn gen_single_step(d: usize, r: usize, t: usize) -> Result<RolloutPlan, RolloutError> {
    if d == 0 || r <= d {
        return Err(RolloutError::InvalidPlanInput(format!(
            "single-step rollout needs 0 < D < R, got D={d}, R={r}"
        )));
    }
    let examples: Vec<(usize, usize)> = (0..d).map(|k| (k, k + 1)).collect();
    let mut plan = RolloutPlan::new((0..r).collect());
    for i in r..t.max(r) {
        plan.push(examples.clone(), i - 1, i);
    }
    Ok(plan)
}

/// Strides grow `1, 2, .., M` over the first steps and stay at `M`; the
/// examples for stride `s` end at the last reference frame, repeated when
/// fewer than `D` exist.
pub fn gen_flexible_step(d: usize, r: usize, m: usize, t: usize) -> Result<RolloutPlan, RolloutError> {
    if d == 0 || m == 0 || r < m + 1 {
        return Err(RolloutError::InvalidPlanInput(format!(
            "flexible rollout needs D > 0, M > 0 and R >= M + 1, got D={d}, R={r}, M={m}"
        )));
    }
    let examples: Vec<Vec<(usize, usize)>> = (1..=m)
        .map(|s| {
            let nd = d.min(r - s);
            let outs: Vec<usize> = (r - nd..r).collect();
            let mut outs = tile_truncate(&outs, d);
            outs.sort_unstable();
            outs.into_iter().map(|o| (o - s, o)).collect()
        })
        .collect();
    let mut plan = RolloutPlan::new((0..r).collect());
    for i in r..t.max(r) {
        let s = (i - r + 1).min(m);
        plan.push(examples[s - 1].clone(), i - s, i);
    }
    Ok(plan)
}

/// Every `(a, b)` of available frames with `b − a = dt`. When fewer than `D`
/// exist the list is tiled, truncated to `D` and sorted by input index.
pub fn get_available_pairs(d: usize, dt: usize, fa: &[usize]) -> Vec<(usize, usize)> {
    let mut fa = fa.to_vec();
    fa.sort_unstable();
    let mut pairs = Vec::new();
    for (i, &a) in fa.iter().enumerate() {
        for &b in &fa[i + 1..] {
            if b - a == dt {
                pairs.push((a, b));
            }
        }
    }
    if pairs.is_empty() || pairs.len() >= d {
        return pairs;
    }
    let mut out = tile_truncate(&pairs, d);
    out.sort();
    out
}

fn sorted_unique(fa: &[usize]) -> Result<Vec<usize>, RolloutError> {
    let set: BTreeSet<usize> = fa.iter().copied().collect();
    if set.is_empty() {
        return Err(RolloutError::InvalidPlanInput("no available frames".into()));
    }
    Ok(set.into_iter().collect())
}

/// Single-step rollout at fixed stride `S` from the available frames `fa`.
/// Frames whose condition `i − S` is never available become gaps.
pub fn gen_single_step_with_drops(d: usize, s: usize, t: usize, fa: &[usize]) -> Result<RolloutPlan, RolloutError> {
    if s == 0 {
        return Err(RolloutError::InvalidPlanInput("stride must be positive".into()));
    }
    let fa = sorted_unique(fa)?;
    let start = *fa.last().unwrap();
    let mut plan = RolloutPlan::new(fa.clone());
    let pairs = get_available_pairs(d, s, &fa);
    let mut known: BTreeSet<usize> = fa.into_iter().collect();
    for i in start + 1..t {
        if pairs.is_empty() || i < s || !known.contains(&(i - s)) {
            plan.gaps.insert(i);
            continue;
        }
        plan.push(pairs.clone(), i - s, i);
        known.insert(i);
    }
    Ok(plan)
}

/// Flexible rollout from the available frames `fa`: each target uses the
/// largest stride `≤ min(i − Fs, M, Ms)` whose condition frame is available.
pub fn gen_flexible_with_drops(d: usize, m: usize, t: usize, fa: &[usize]) -> Result<RolloutPlan, RolloutError> {
    let fa = sorted_unique(fa)?;
    let start = *fa.last().unwrap();
    let pools: Vec<(usize, Vec<(usize, usize)>)> = (1..=m)
        .map(|dt| (dt, get_available_pairs(d, dt, &fa)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    let mut plan = RolloutPlan::new(fa.clone());
    let ms = pools.last().map(|(dt, _)| *dt).unwrap_or(0);
    let mut known: BTreeSet<usize> = fa.into_iter().collect();
    for i in start + 1..t {
        let cap = (i - start).min(m).min(ms);
        let found = pools
            .iter()
            .rev()
            .find(|(s, _)| *s <= cap && known.contains(&(i - s)));
        match found {
            Some((s, pairs)) => {
                plan.push(pairs.clone(), i - s, i);
                known.insert(i);
            }
            None => {
                plan.gaps.insert(i);
            }
        }
    }
    Ok(plan)
}

/// A broken plan invariant found by [`check_plan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub step: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {}", self.step, self.message)
    }
}

/// Replays a plan and reports every reference to a frame that is not yet
/// available, every stride inconsistency and every bookkeeping mismatch.
pub fn check_plan(plan: &RolloutPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut known: BTreeSet<usize> = plan.given.iter().copied().collect();
    let mut last_out = None;
    for (k, st) in plan.steps.iter().enumerate() {
        let step = k + 1;
        let mut bad = |message: String| out.push(Violation { step, message });
        if st.question_out < st.question_in || st.question_out - st.question_in != st.stride || st.stride == 0 {
            bad(format!(
                "question {}->{} does not match stride {}",
                st.question_in, st.question_out, st.stride
            ));
        }
        if !known.contains(&st.question_in) {
            bad(format!("question condition {} is not available", st.question_in));
        }
        if st.example_pairs.is_empty() {
            bad("no examples".into());
        }
        for &(a, b) in &st.example_pairs {
            if b < a || b - a != st.stride {
                bad(format!("example ({a},{b}) does not match stride {}", st.stride));
            }
            for idx in [a, b] {
                if !known.contains(&idx) {
                    bad(format!("example frame {idx} is not available"));
                }
            }
        }
        if last_out.is_some_and(|o| st.question_out <= o) {
            bad(format!("question output {} is not increasing", st.question_out));
        }
        if known.contains(&st.question_out) {
            bad(format!("frame {} is already available", st.question_out));
        }
        last_out = Some(st.question_out);
        known.insert(st.question_out);
    }
    let outs: BTreeSet<usize> = plan.steps.iter().map(|s| s.question_out).collect();
    if outs != plan.covered {
        out.push(Violation {
            step: 0,
            message: "covered set does not match the predicted frames".into(),
        });
    }
    if let Some(g) = plan.covered.intersection(&plan.gaps).next() {
        out.push(Violation {
            step: 0,
            message: format!("frame {g} is both covered and a gap"),
        });
    }
    out
}

fn join(xs: impl IntoIterator<Item = usize>) -> String {
    let s: Vec<String> = xs.into_iter().map(|x| x.to_string()).collect();
    if s.is_empty() {
        "-".into()
    } else {
        s.join(" ")
    }
}

impl RolloutPlan {
    /// One row per step, `index | examples | question cond | predicted qoi`,
    /// followed by the given frames and the gaps.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# rollout index | examples (cond,qoi) | question cond | predict qoi\n");
        for (k, st) in self.steps.iter().enumerate() {
            let ex: Vec<String> = st.example_pairs.iter().map(|(a, b)| format!("({a},{b})")).collect();
            let _ = writeln!(s, "{} | {} | {} | {}", k + 1, ex.join(" "), st.question_in, st.question_out);
        }
        let _ = writeln!(s, "given: {}", join(self.given.iter().copied()));
        let _ = writeln!(s, "gaps: {}", join(self.gaps.iter().copied()));
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RolloutError> {
        let err = |line: usize, msg: &str| RolloutError::PlanText {
            line: line + 1,
            message: msg.to_string(),
        };
        let num = |line: usize, s: &str| s.trim().parse::<usize>().map_err(|_| err(line, "expected an integer"));
        let list = |line: usize, s: &str| -> Result<Vec<usize>, RolloutError> {
            let s = s.trim();
            if s == "-" {
                return Ok(Vec::new());
            }
            s.split_whitespace().map(|x| num(line, x)).collect()
        };
        let mut plan = RolloutPlan::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("given:") {
                plan.given = list(n, rest)?;
                continue;
            }
            if let Some(rest) = line.strip_prefix("gaps:") {
                plan.gaps = list(n, rest)?.into_iter().collect();
                continue;
            }
            let cols: Vec<&str> = line.split('|').collect();
            if cols.len() != 4 {
                return Err(err(n, "expected 4 columns"));
            }
            if num(n, cols[0])? != plan.steps.len() + 1 {
                return Err(err(n, "rollout index out of sequence"));
            }
            let mut examples = Vec::new();
            for tok in cols[1].split_whitespace() {
                let inner = tok
                    .strip_prefix('(')
                    .and_then(|t| t.strip_suffix(')'))
                    .ok_or_else(|| err(n, "malformed example pair"))?;
                let (a, b) = inner.split_once(',').ok_or_else(|| err(n, "malformed example pair"))?;
                examples.push((num(n, a)?, num(n, b)?));
            }
            let (qi, qo) = (num(n, cols[2])?, num(n, cols[3])?);
            if qo <= qi {
                return Err(err(n, "question output must follow its input"));
            }
            plan.push(examples, qi, qo);
        }
        Ok(plan)
    }
}
