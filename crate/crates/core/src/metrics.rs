//! Text-generation metrics and the benchmark report.
//!
//! All surface metrics share one tokenizer: lowercase, split on whitespace, and
//! every punctuation character becomes its own token.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::clients::{cosine, EmbeddingProvider, JudgeClient};
use crate::error::{Error, ParseError, Result};
use crate::prompt::TaskType;

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and the candidate's n-gram total.
pub fn clipped_matches(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Sentence BLEU: geometric mean of clipped precisions for orders
/// `1..=min(max_n, |candidate|)` times the brevity penalty against the closest
/// reference length. Orders above 1 with no match use `ε / total`.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> f64 {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    if cand.is_empty() || refs.is_empty() || max_n == 0 {
        return 0.0;
    }
    let order = max_n.min(cand.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let (m, total) = clipped_matches(&cand, &refs, n);
        let p = if m > 0 {
            m as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            BLEU_EPSILON / total as f64
        };
        log_sum += p.ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (bp * (log_sum / order as f64).exp()).clamp(0.0, 1.0)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_THETA: f64 = 3.0;

/// Crude suffix stripping used by the second METEOR matching stage.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "edly", "ed", "es", "ly", "s"] {
        if let Some(s) = word.strip_suffix(suffix) {
            if s.len() >= 3 {
                return s;
            }
        }
    }
    word
}

/// `(candidate index, reference index)` pairs, sorted by candidate index.
/// Exact matches first, then stem matches, each leftmost-greedy.
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let stages: [fn(&str) -> &str; 2] = [|w| w, stem];
    for key in stages {
        for (i, c) in cand.iter().enumerate() {
            if used_c[i] {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !used_r[j] && key(&reference[j]) == key(c)) {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of runs of matches adjacent in both candidate and reference.
pub fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let pairs = meteor_alignment(&c, &r);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f_mean = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
    let penalty = METEOR_GAMMA * (chunk_count(&pairs) as f64 / m as f64).powf(METEOR_THETA);
    f_mean * (1.0 - penalty)
}

/// Greedy token matching on embedding cosines clamped to `[0, 1]`.
pub fn semantic_f(candidate: &str, reference: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Ok(0.0);
    }
    let ce: Vec<Vec<f64>> = c.iter().map(|t| provider.embed(t)).collect::<Result<_>>()?;
    let re: Vec<Vec<f64>> = r.iter().map(|t| provider.embed(t)).collect::<Result<_>>()?;
    let sims: Vec<Vec<f64>> = ce
        .iter()
        .map(|a| re.iter().map(|b| cosine(a, b).clamp(0.0, 1.0)).collect())
        .collect();
    let p = sims.iter().map(|row| row.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / c.len() as f64;
    let rec = (0..r.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / r.len() as f64;
    Ok(if p + rec == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) })
}

pub const DEFAULT_RUBRIC: &str = "rate the candidate answer against the reference on a continuous scale from 0 to 1. \
judge semantic accuracy and content coverage: the affected body regions, pressure distribution patterns, \
posture-related health risks and correction strategies. reply with the score only.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    #[serde(default)]
    pub id: String,
    pub task_type: TaskType,
    pub candidate: String,
    pub reference: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JudgeOutcome {
    pub score: Option<f64>,
    pub clamped: bool,
}

pub fn gpt_score(pair: &EvalPair, judge: &dyn JudgeClient, rubric: &str) -> JudgeOutcome {
    let question = format!(
        "task: {}\nreference: {}\ncandidate: {}\n{rubric}",
        pair.task_type, pair.reference, pair.candidate
    );
    match judge.judge(&question, &pair.candidate, &pair.reference, rubric) {
        Ok(s) if s.is_finite() => JudgeOutcome {
            score: Some(s.clamp(0.0, 1.0)),
            clamped: !(0.0..=1.0).contains(&s),
        },
        _ => JudgeOutcome {
            score: None,
            clamped: false,
        },
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSelection {
    pub bleu: bool,
    pub rouge_l: bool,
    pub semantic_f: bool,
    pub meteor: bool,
    pub gpt_score: bool,
}

impl MetricSelection {
    pub fn surface() -> Self {
        Self {
            bleu: true,
            rouge_l: true,
            semantic_f: true,
            meteor: true,
            gpt_score: false,
        }
    }

    pub fn all() -> Self {
        Self {
            gpt_score: true,
            ..Self::surface()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub id: String,
    pub task_type: Option<TaskType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantic_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meteor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpt_score: Option<f64>,
    /// Imported, never computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_score: Option<f64>,
}

const METRIC_NAMES: [&str; 6] = ["bleu", "rouge_l", "semantic_f", "meteor", "gpt_score", "human_score"];

impl PairScores {
    fn values(&self) -> [Option<f64>; 6] {
        [self.bleu, self.rouge_l, self.semantic_f, self.meteor, self.gpt_score, self.human_score]
    }
}

/// Means keyed by metric name plus the number of pairs behind each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub means: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub pairs: usize,
}

impl MetricMeans {
    fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a PairScores>) -> Self {
        let mut sums = [0.0; 6];
        let mut counts = [0usize; 6];
        let mut n = 0;
        for p in pairs {
            n += 1;
            for (k, v) in p.values().into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
        let mut out = MetricMeans {
            pairs: n,
            ..Default::default()
        };
        for k in 0..METRIC_NAMES.len() {
            if counts[k] > 0 {
                out.means.insert(METRIC_NAMES[k].into(), sums[k] / counts[k] as f64);
                out.counts.insert(METRIC_NAMES[k].into(), counts[k]);
            }
        }
        out
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.means.get(metric).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: Vec<PairScores>,
    pub per_task: BTreeMap<TaskType, MetricMeans>,
    pub overall: MetricMeans,
    /// Task types with no pairs.
    pub absent_tasks: Vec<TaskType>,
    pub skipped: usize,
    pub judge_failures: usize,
    pub judge_clamped: usize,
}

/// Per-pair scoring then per-task and overall means. Pairs without a candidate
/// are skipped and counted.
pub fn run_benchmark(
    pairs: &[Option<EvalPair>],
    selection: MetricSelection,
    provider: &dyn EmbeddingProvider,
    judge: Option<&dyn JudgeClient>,
    rubric: &str,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for pair in pairs {
        let Some(pair) = pair else {
            report.skipped += 1;
            continue;
        };
        if pair.reference.trim().is_empty() {
            return Err(Error::data(format!("pair {:?} has an empty reference", pair.id)));
        }
        let mut s = PairScores {
            id: pair.id.clone(),
            task_type: Some(pair.task_type),
            ..Default::default()
        };
        if selection.bleu {
            s.bleu = Some(bleu(&pair.candidate, &[&pair.reference], 4));
        }
        if selection.rouge_l {
            s.rouge_l = Some(rouge_l(&pair.candidate, &pair.reference));
        }
        if selection.semantic_f {
            s.semantic_f = Some(semantic_f(&pair.candidate, &pair.reference, provider)?);
        }
        if selection.meteor {
            s.meteor = Some(meteor(&pair.candidate, &pair.reference));
        }
        if selection.gpt_score {
            if let Some(j) = judge {
                let o = gpt_score(pair, j, rubric);
                s.gpt_score = o.score;
                report.judge_failures += usize::from(o.score.is_none());
                report.judge_clamped += usize::from(o.clamped);
            }
        }
        report.pairs.push(s);
    }
    aggregate(&mut report);
    Ok(report)
}

fn aggregate(report: &mut MetricReport) {
    report.per_task.clear();
    report.absent_tasks.clear();
    for task in TaskType::ALL {
        let bucket: Vec<&PairScores> = report.pairs.iter().filter(|p| p.task_type == Some(task)).collect();
        if bucket.is_empty() {
            report.absent_tasks.push(task);
        } else {
            report.per_task.insert(task, MetricMeans::from_pairs(bucket));
        }
    }
    report.overall = MetricMeans::from_pairs(&report.pairs);
}

/// Joins imported human ratings onto pairs by id and refreshes the means.
/// Returns how many pairs received a rating.
pub fn attach_human_scores(report: &mut MetricReport, scores: &BTreeMap<String, f64>) -> usize {
    let mut hits = 0;
    for p in &mut report.pairs {
        p.human_score = scores.get(&p.id).copied();
        hits += usize::from(p.human_score.is_some());
    }
    aggregate(report);
    hits
}

/// Fixed-width table: one row per task present, then the overall row.
pub fn render_table(report: &MetricReport) -> String {
    let cols: Vec<&str> = METRIC_NAMES
        .iter()
        .copied()
        .filter(|m| report.overall.means.contains_key(*m))
        .collect();
    let mut out = format!("{:<12}{:>7}", "task", "pairs");
    for c in &cols {
        let _ = write!(out, "{c:>12}");
    }
    out.push('\n');
    let mut row = |name: &str, m: &MetricMeans| {
        let _ = write!(out, "{name:<12}{:>7}", m.pairs);
        for c in &cols {
            match m.get(c) {
                Some(v) => {
                    let _ = write!(out, "{v:>12.4}");
                }
                None => {
                    let _ = write!(out, "{:>12}", "-");
                }
            }
        }
        out.push('\n');
    };
    for (task, m) in &report.per_task {
        row(task.as_str(), m);
    }
    row("overall", &report.overall);
    out
}

/// Reads `id,score` rows of externally collected human ratings.
pub fn read_human_scores<R: Read>(source: R) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ParseError::Line {
            line,
            message: e.to_string(),
        })?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let token = rec.get(1).unwrap_or_default();
        let score: f64 = token.parse().map_err(|_| ParseError::Number {
            line,
            token: token.to_string(),
        })?;
        out.insert(id, score);
    }
    Ok(out)
}
