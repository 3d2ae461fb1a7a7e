//! Corpus loading, the synthetic generator, and word-overlap analysis.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{list, KeyValues};
use crate::encoder::SentencePair;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::rng::RngStream;
use crate::vocab::Vocabulary;

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliExample {
    pub id: String,
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: Label,
    pub genre: Option<String>,
}

impl NliExample {
    pub fn new(id: impl Into<String>, premise: Vec<String>, hypothesis: Vec<String>, label: Label) -> Result<Self> {
        if premise.is_empty() {
            return Err(Error::Empty("premise"));
        }
        if hypothesis.is_empty() {
            return Err(Error::Empty("hypothesis"));
        }
        Ok(NliExample {
            id: id.into(),
            premise,
            hypothesis,
            label,
            genre: None,
        })
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Result<SentencePair> {
        SentencePair::new(vocab.encode(&self.premise), vocab.encode(&self.hypothesis), vocab.len())
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    sentence1: String,
    sentence2: String,
    gold_label: String,
    #[serde(default)]
    genre: Option<String>,
    #[serde(default, rename = "pairID")]
    pair_id: Option<String>,
}

#[derive(Serialize)]
struct JsonOut<'a> {
    #[serde(rename = "pairID")]
    pair_id: &'a str,
    sentence1: String,
    sentence2: String,
    gold_label: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    genre: Option<&'a str>,
}

/// Examples read from a JSONL corpus, plus the number of `-` lines skipped.
#[derive(Clone, Debug, Default)]
pub struct Loaded {
    pub examples: Vec<NliExample>,
    pub dropped: usize,
}

pub fn load_jsonl(path: &Path) -> Result<Loaded> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file), &path.display().to_string())
}

/// Reads JSONL records with `sentence1`, `sentence2` and `gold_label`
/// (plus optional `genre` and `pairID`). Lines labelled `-` are dropped.
pub fn parse_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Loaded> {
    let mut out = Loaded::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(Path::new(source), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.gold_label.trim() == "-" {
            out.dropped += 1;
            continue;
        }
        let label: Label = rec
            .gold_label
            .parse()
            .map_err(|e: Error| parse_err(e.to_string()))?;
        let id = rec.pair_id.unwrap_or_else(|| format!("line{}", i + 1));
        let mut ex = NliExample::new(id, tokenize(&rec.sentence1), tokenize(&rec.sentence2), label)
            .map_err(|e| parse_err(e.to_string()))?;
        ex.genre = rec.genre;
        out.examples.push(ex);
    }
    Ok(out)
}

/// Writes examples in the same JSONL schema [`load_jsonl`] reads.
pub fn write_jsonl<W: Write>(mut w: W, examples: &[NliExample]) -> std::io::Result<()> {
    for ex in examples {
        let rec = JsonOut {
            pair_id: &ex.id,
            sentence1: ex.premise.join(" "),
            sentence2: ex.hypothesis.join(" "),
            gold_label: ex.label.name(),
            genre: ex.genre.as_deref(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, examples: &[NliExample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(&mut w, examples).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn build_vocab(examples: &[NliExample], min_count: usize) -> Result<Vocabulary> {
    if examples.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(Vocabulary::build(
        examples
            .iter()
            .flat_map(|e| [e.premise.as_slice(), e.hypothesis.as_slice()]),
        min_count,
    ))
}

/// Parameters of the synthetic corpus.
///
/// Every premise is a run of content words with one antonym-pair "left"
/// word inserted. Every hypothesis copies a contiguous premise span; then
/// * entailment keeps the span as is,
/// * neutral inserts exactly one hypothesis-only marker,
/// * contradiction either swaps the left antonym for its right partner or
///   inserts a negation word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub examples: usize,
    pub content_words: usize,
    pub premise_min: usize,
    pub premise_max: usize,
    pub span_min: usize,
    pub span_max: usize,
    pub neutral_markers: Vec<String>,
    pub antonyms: Vec<(String, String)>,
    pub negations: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            examples: 300,
            content_words: 40,
            premise_min: 4,
            premise_max: 7,
            span_min: 2,
            span_max: 4,
            neutral_markers: strings(&["also", "maybe", "perhaps", "probably"]),
            antonyms: [("big", "small"), ("hot", "cold"), ("open", "closed"), ("early", "late")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            negations: strings(&["not", "never"]),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.examples == 0 {
            return bad("examples must be positive");
        }
        if self.content_words == 0 {
            return bad("content_words must be positive");
        }
        if self.premise_min == 0 || self.premise_min > self.premise_max {
            return bad("need 1 <= premise_min <= premise_max");
        }
        if self.span_min == 0 || self.span_min > self.span_max {
            return bad("need 1 <= span_min <= span_max");
        }
        if self.neutral_markers.is_empty() || self.antonyms.is_empty() || self.negations.is_empty() {
            return bad("marker, antonym and negation lists must be non-empty");
        }
        let mut seen = HashSet::new();
        let content: Vec<String> = (0..self.content_words).map(content_word).collect();
        let all = content
            .iter()
            .chain(&self.neutral_markers)
            .chain(&self.negations)
            .chain(self.antonyms.iter().flat_map(|(a, b)| [a, b]));
        for w in all {
            if !seen.insert(w.as_str()) || tokenize(w).len() != 1 || tokenize(w)[0] != *w {
                return bad(&format!("token `{w}` is repeated or not a single lowercase token"));
            }
        }
        Ok(())
    }

    /// Overrides fields from `synth.*` keys (or bare keys when `prefix` is empty).
    pub fn apply(&mut self, kv: &KeyValues, prefix: &str) -> Result<()> {
        for e in &kv.entries {
            let Some(key) = e.key.strip_prefix(prefix) else { continue };
            match key {
                "seed" => self.seed = kv.value(e)?,
                "examples" => self.examples = kv.value(e)?,
                "content_words" => self.content_words = kv.value(e)?,
                "premise_min" => self.premise_min = kv.value(e)?,
                "premise_max" => self.premise_max = kv.value(e)?,
                "span_min" => self.span_min = kv.value(e)?,
                "span_max" => self.span_max = kv.value(e)?,
                "neutral_markers" => self.neutral_markers = list(&e.value),
                "negations" => self.negations = list(&e.value),
                "antonyms" => {
                    self.antonyms = list(&e.value)
                        .iter()
                        .map(|pair| {
                            pair.split_once(':')
                                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                                .ok_or_else(|| kv.error(e, format!("antonym `{pair}` is not `left:right`")))
                        })
                        .collect::<Result<_>>()?;
                }
                _ if prefix.is_empty() => return Err(kv.error(e, format!("unknown key `{}`", e.key))),
                _ => return Err(kv.error(e, format!("unknown synthetic key `{}`", e.key))),
            }
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        let mut spec = SyntheticSpec::default();
        spec.apply(&kv, "")?;
        Ok(spec)
    }

    /// Every token that only ever appears in a hypothesis of the given label.
    pub fn markers(&self, label: Label) -> Vec<String> {
        match label {
            Label::Entailment => Vec::new(),
            Label::Neutral => self.neutral_markers.clone(),
            Label::Contradiction => self
                .antonyms
                .iter()
                .map(|(_, b)| b.clone())
                .chain(self.negations.iter().cloned())
                .collect(),
        }
    }
}

fn content_word(i: usize) -> String {
    format!("w{i}")
}

/// Deterministic synthetic corpus. Labels cycle entailment, neutral,
/// contradiction, so per-label counts differ by at most one.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<NliExample>> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let mut out = Vec::with_capacity(spec.examples);
    for n in 0..spec.examples {
        let label = Label::ALL[n % 3];
        let len = rng.range_inclusive(spec.premise_min, spec.premise_max);
        let mut premise: Vec<String> = (0..len).map(|_| content_word(rng.below(spec.content_words))).collect();
        let pair = rng.below(spec.antonyms.len());
        let anchor = rng.below(premise.len() + 1);
        premise.insert(anchor, spec.antonyms[pair].0.clone());

        let hi = spec.span_max.min(premise.len());
        let span_len = rng.range_inclusive(spec.span_min.min(hi), hi);
        let swap = label == Label::Contradiction && rng.bernoulli(0.5);
        let start = if swap {
            // the span must cover the antonym
            let lo = (anchor + 1).saturating_sub(span_len);
            let hi = anchor.min(premise.len() - span_len);
            rng.range_inclusive(lo, hi)
        } else {
            rng.below(premise.len() - span_len + 1)
        };
        let mut hypothesis = premise[start..start + span_len].to_vec();
        match label {
            Label::Entailment => {}
            Label::Neutral => {
                let at = rng.below(hypothesis.len() + 1);
                hypothesis.insert(at, rng.choose(&spec.neutral_markers).clone());
            }
            Label::Contradiction if swap => {
                hypothesis[anchor - start] = spec.antonyms[pair].1.clone();
            }
            Label::Contradiction => {
                let at = rng.below(hypothesis.len() + 1);
                hypothesis.insert(at, rng.choose(&spec.negations).clone());
            }
        }
        let mut ex = NliExample::new(format!("synth-{n}"), premise, hypothesis, label)?;
        ex.genre = Some("synthetic".into());
        out.push(ex);
    }
    Ok(out)
}

/// Which sentence length normalizes the overlap rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapNorm {
    /// Hypothesis tokens found in the premise, over hypothesis length.
    #[default]
    Hypothesis,
    /// Premise tokens found in the hypothesis, over premise length.
    Premise,
}

/// Exact overlap count behind a rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub shared: usize,
    pub total: usize,
}

impl Overlap {
    pub fn rate(self) -> f64 {
        self.shared as f64 / self.total as f64
    }

    /// Bin index 0..=5; computed on integers so boundaries are exact.
    pub fn bin(self) -> usize {
        if self.shared >= self.total {
            5
        } else {
            5 * self.shared / self.total
        }
    }
}

pub fn overlap(premise: &[String], hypothesis: &[String], norm: OverlapNorm) -> Result<Overlap> {
    if hypothesis.is_empty() {
        return Err(Error::Empty("hypothesis"));
    }
    let (from, against) = match norm {
        OverlapNorm::Hypothesis => (hypothesis, premise),
        OverlapNorm::Premise => {
            if premise.is_empty() {
                return Err(Error::Empty("premise"));
            }
            (premise, hypothesis)
        }
    };
    let set: HashSet<&str> = against.iter().map(String::as_str).collect();
    Ok(Overlap {
        shared: from.iter().filter(|t| set.contains(t.as_str())).count(),
        total: from.len(),
    })
}

/// Fraction of hypothesis tokens (duplicates counted) that occur in the premise.
pub fn word_overlap_rate(premise: &[String], hypothesis: &[String]) -> Result<f64> {
    overlap(premise, hypothesis, OverlapNorm::Hypothesis).map(Overlap::rate)
}

pub const BIN_NAMES: [&str; 6] = ["[0,0.2)", "[0.2,0.4)", "[0.4,0.6)", "[0.6,0.8)", "[0.8,1.0)", "1.0"];

/// Bin index of a rate given as a float; prefer [`Overlap::bin`] when the
/// counts are available.
pub fn bin_of_rate(rate: f64) -> usize {
    if rate >= 1.0 {
        5
    } else {
        ((rate * 5.0).floor().max(0.0) as usize).min(4)
    }
}

/// Per-example bin assignment and per-bin label counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapBinning {
    pub norm: OverlapNorm,
    pub overlaps: Vec<Overlap>,
    pub bins: Vec<usize>,
    /// `counts[bin][label]`.
    pub counts: [[usize; 3]; 6],
}

impl OverlapBinning {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn bin_total(&self, bin: usize) -> usize {
        self.counts[bin].iter().sum()
    }
}

pub fn bin_by_overlap(examples: &[NliExample], norm: OverlapNorm) -> Result<OverlapBinning> {
    let mut b = OverlapBinning {
        norm,
        overlaps: Vec::with_capacity(examples.len()),
        bins: Vec::with_capacity(examples.len()),
        counts: [[0; 3]; 6],
    };
    for ex in examples {
        let o = overlap(&ex.premise, &ex.hypothesis, norm)?;
        let bin = o.bin();
        b.overlaps.push(o);
        b.bins.push(bin);
        b.counts[bin][ex.label.index()] += 1;
    }
    Ok(b)
}

/// One CSV row: a (bin, label) cell, or the whole bin when `label` is `all`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub bin: String,
    pub label: String,
    pub count: usize,
    pub errors: usize,
    /// Empty when the cell has no examples.
    pub error_rate: Option<f64>,
}

pub fn error_report(binning: &OverlapBinning, examples: &[NliExample], predictions: &[Label]) -> Result<Vec<ErrorRow>> {
    if predictions.len() != examples.len() || binning.len() != examples.len() {
        return Err(Error::Length {
            what: "predictions",
            left: examples.len(),
            right: predictions.len(),
        });
    }
    let mut errors = [[0usize; 3]; 6];
    for ((ex, pred), &bin) in examples.iter().zip(predictions).zip(&binning.bins) {
        if *pred != ex.label {
            errors[bin][ex.label.index()] += 1;
        }
    }
    let rate = |e: usize, c: usize| (c > 0).then(|| e as f64 / c as f64);
    let mut rows = Vec::new();
    for (bin, name) in BIN_NAMES.iter().enumerate() {
        for label in Label::ALL {
            let (c, e) = (binning.counts[bin][label.index()], errors[bin][label.index()]);
            rows.push(ErrorRow {
                bin: name.to_string(),
                label: label.name().to_string(),
                count: c,
                errors: e,
                error_rate: rate(e, c),
            });
        }
        let (c, e) = (binning.bin_total(bin), errors[bin].iter().sum());
        rows.push(ErrorRow {
            bin: name.to_string(),
            label: "all".into(),
            count: c,
            errors: e,
            error_rate: rate(e, c),
        });
    }
    Ok(rows)
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
    Ok(())
}

/// One example's overlap, for per-example CSV output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub id: String,
    pub label: String,
    pub shared: usize,
    pub total: usize,
    pub rate: f64,
    pub bin: String,
}

pub fn overlap_rows(examples: &[NliExample], binning: &OverlapBinning) -> Vec<OverlapRow> {
    examples
        .iter()
        .zip(binning.overlaps.iter().zip(&binning.bins))
        .map(|(ex, (o, &b))| OverlapRow {
            id: ex.id.clone(),
            label: ex.label.name().to_string(),
            shared: o.shared,
            total: o.total,
            rate: o.rate(),
            bin: BIN_NAMES[b].to_string(),
        })
        .collect()
}

/// Published per-bin label counts (rows EN, NE, CON) for the MultiNLI
/// development sets under hypothesis-normalized overlap.
pub const REFERENCE_MATCHED: [[usize; 6]; 3] = [
    [458, 1331, 986, 513, 147, 44],
    [982, 1254, 495, 253, 68, 71],
    [845, 1368, 651, 284, 54, 11],
];
pub const REFERENCE_MISMATCHED: [[usize; 6]; 3] = [
    [317, 1221, 1123, 599, 161, 42],
    [849, 1264, 578, 290, 101, 47],
    [684, 1459, 725, 289, 75, 8],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub bin: String,
    pub label: String,
    pub ours: usize,
    pub reference: usize,
    /// `(ours − reference) / reference`.
    pub relative_deviation: f64,
}

/// Side-by-side per-bin counts against a reference table, including a
/// `total` row per bin.
pub fn compare_reference(binning: &OverlapBinning, reference: &[[usize; 6]; 3]) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for (bin, name) in BIN_NAMES.iter().enumerate() {
        let mut push = |label: &str, ours: usize, reference: usize| {
            rows.push(ComparisonRow {
                bin: name.to_string(),
                label: label.to_string(),
                ours,
                reference,
                relative_deviation: (ours as f64 - reference as f64) / reference as f64,
            })
        };
        for label in Label::ALL {
            push(label.name(), binning.counts[bin][label.index()], reference[label.index()][bin]);
        }
        push("total", binning.bin_total(bin), reference.iter().map(|r| r[bin]).sum());
    }
    rows
}

/// JSON summary written next to the CSV reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub examples: usize,
    pub norm: OverlapNorm,
    pub bins: Vec<BinSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overall_error_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: String,
    pub entailment: usize,
    pub neutral: usize,
    pub contradiction: usize,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_rate: Option<f64>,
}

pub fn summarize(binning: &OverlapBinning, errors: Option<&[ErrorRow]>) -> AnalysisSummary {
    let bin_rate = |name: &str| {
        errors.and_then(|rows| {
            rows.iter()
                .find(|r| r.bin == name && r.label == "all")
                .and_then(|r| r.error_rate)
        })
    };
    let overall = errors.and_then(|rows| {
        let all: Vec<_> = rows.iter().filter(|r| r.label == "all").collect();
        let n: usize = all.iter().map(|r| r.count).sum();
        (n > 0).then(|| all.iter().map(|r| r.errors).sum::<usize>() as f64 / n as f64)
    });
    AnalysisSummary {
        examples: binning.len(),
        norm: binning.norm,
        bins: BIN_NAMES
            .iter()
            .enumerate()
            .map(|(b, name)| BinSummary {
                bin: name.to_string(),
                entailment: binning.counts[b][0],
                neutral: binning.counts[b][1],
                contradiction: binning.counts[b][2],
                total: binning.bin_total(b),
                error_rate: bin_rate(name),
            })
            .collect(),
        overall_error_rate: overall,
    }
}
