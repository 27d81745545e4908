//! Expression/AU prior knowledge: the three-level relevance table, the AU
//! co-occurrence pair sets, and the line-oriented file format they live in.
//!
//! ```text
//! [expressions]
//! Happy
//! [aus]
//! CheekRaiser 6
//! [relevance]
//! Happy : AU6=P AU12=S
//! [levels]
//! primary=0.9 secondary=0.5 none=0.05
//! [positive_pairs]
//! AU1,AU2
//! ```
//!
//! AU references accept `AU<n>`, the bare FACS number, or the AU name.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// The knowledge file shipped with the crate.
pub const DEFAULT_KNOWLEDGE: &str = include_str!("../data/default.kb");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relevance {
    Primary,
    Secondary,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionUnit {
    pub name: String,
    pub facs: u32,
}

impl fmt::Display for ActionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{}", self.facs)
    }
}

/// Probabilities assigned to each relevance level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceLevels {
    pub primary_p: f64,
    pub secondary_p: f64,
    pub none_p: f64,
}

impl Default for RelevanceLevels {
    fn default() -> Self {
        RelevanceLevels {
            primary_p: 0.9,
            secondary_p: 0.5,
            none_p: 0.05,
        }
    }
}

impl RelevanceLevels {
    pub fn new(primary_p: f64, secondary_p: f64, none_p: f64) -> Result<Self> {
        let levels = RelevanceLevels {
            primary_p,
            secondary_p,
            none_p,
        };
        levels.validate()?;
        Ok(levels)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.none_p
            && self.none_p < self.secondary_p
            && self.secondary_p < self.primary_p
            && self.primary_p <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "relevance levels must satisfy 0 <= none < secondary < primary <= 1, got \
                 primary={} secondary={} none={}",
                self.primary_p, self.secondary_p, self.none_p
            )))
        }
    }

    pub fn value(&self, rel: Relevance) -> f64 {
        match rel {
            Relevance::Primary => self.primary_p,
            Relevance::Secondary => self.secondary_p,
            Relevance::None => self.none_p,
        }
    }

    /// Parses `primary=0.9 secondary=0.5 none=0.05`.
    pub fn parse(line: &str) -> Result<Self> {
        let (mut p, mut s, mut n) = (None, None, None);
        for tok in line.split_whitespace() {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("levels token `{tok}` is not key=value")))?;
            let v: f64 = val
                .parse()
                .map_err(|_| Error::Parse(format!("levels value `{val}` is not a number")))?;
            match key {
                "primary" => p = Some(v),
                "secondary" => s = Some(v),
                "none" => n = Some(v),
                other => return Err(Error::Parse(format!("unknown levels key `{other}`"))),
            }
        }
        match (p, s, n) {
            (Some(p), Some(s), Some(n)) => RelevanceLevels::new(p, s, n),
            _ => Err(Error::Parse(
                "levels line needs primary=, secondary= and none=".into(),
            )),
        }
    }
}

/// Unordered AU index pair, stored as `(min, max)`.
pub type AuPair = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    expressions: Vec<String>,
    aus: Vec<ActionUnit>,
    relevance: Vec<Vec<Relevance>>,
    levels: RelevanceLevels,
    positive_pairs: BTreeSet<AuPair>,
    negative_pairs: BTreeSet<AuPair>,
}

impl KnowledgeBase {
    pub fn new(
        expressions: Vec<String>,
        aus: Vec<ActionUnit>,
        relevance: Vec<Vec<Relevance>>,
        levels: RelevanceLevels,
        positive_pairs: impl IntoIterator<Item = AuPair>,
        negative_pairs: impl IntoIterator<Item = AuPair>,
    ) -> Result<Self> {
        let kb = KnowledgeBase {
            expressions,
            aus,
            relevance,
            levels,
            positive_pairs: canonical(positive_pairs)?,
            negative_pairs: canonical(negative_pairs)?,
        };
        kb.validate()?;
        Ok(kb)
    }

    /// The shipped seven-expression, twelve-AU knowledge base.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_KNOWLEDGE).expect("shipped knowledge file is valid")
    }

    fn validate(&self) -> Result<()> {
        let e = self.expressions.len();
        let a = self.aus.len();
        if e < 2 || a < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 expressions and 2 AUs, got E={e} A={a}"
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.expressions {
            if !seen.insert(name.to_lowercase()) {
                return Err(Error::Validation(format!("duplicate expression `{name}`")));
            }
        }
        let mut names = HashSet::new();
        let mut numbers = HashSet::new();
        for au in &self.aus {
            if !names.insert(au.name.to_lowercase()) {
                return Err(Error::Validation(format!("duplicate AU name `{}`", au.name)));
            }
            if !numbers.insert(au.facs) {
                return Err(Error::Validation(format!("duplicate AU number {}", au.facs)));
            }
        }
        if self.relevance.len() != e || self.relevance.iter().any(|row| row.len() != a) {
            return Err(Error::Validation(format!(
                "relevance table must be {e}x{a}"
            )));
        }
        self.levels.validate()?;
        for &(i, j) in self.positive_pairs.iter().chain(&self.negative_pairs) {
            if j >= a {
                return Err(Error::Validation(format!(
                    "pair ({i},{j}) has AU index out of range for A={a}"
                )));
            }
        }
        if let Some(p) = self.positive_pairs.intersection(&self.negative_pairs).next() {
            return Err(Error::Validation(format!(
                "pair ({},{}) listed as both positive and negative",
                self.aus[p.0], self.aus[p.1]
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Clone, Copy, PartialEq)]
        enum Section {
            None,
            Expressions,
            Aus,
            Relevance,
            Levels,
            Positive,
            Negative,
        }

        let mut section = Section::None;
        let mut expressions = Vec::new();
        let mut aus = Vec::new();
        let mut relevance_lines = Vec::new();
        let mut pos_lines = Vec::new();
        let mut neg_lines = Vec::new();
        let mut levels = None;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = match line {
                    "[expressions]" => Section::Expressions,
                    "[aus]" => Section::Aus,
                    "[relevance]" => Section::Relevance,
                    "[levels]" => Section::Levels,
                    "[positive_pairs]" => Section::Positive,
                    "[negative_pairs]" => Section::Negative,
                    other => {
                        return Err(Error::Parse(format!(
                            "line {lineno}: unknown section {other}"
                        )))
                    }
                };
                continue;
            }
            match section {
                Section::None => {
                    return Err(Error::Parse(format!(
                        "line {lineno}: content before the first section header"
                    )))
                }
                Section::Expressions => {
                    if line.split_whitespace().count() != 1 {
                        return Err(Error::Parse(format!(
                            "line {lineno}: expression names may not contain spaces"
                        )));
                    }
                    expressions.push(line.to_string());
                }
                Section::Aus => aus.push(parse_au_decl(line, lineno)?),
                Section::Relevance => relevance_lines.push((lineno, line.to_string())),
                Section::Levels => {
                    if levels.is_some() {
                        return Err(Error::Parse(format!(
                            "line {lineno}: duplicate levels line"
                        )));
                    }
                    levels = Some(
                        RelevanceLevels::parse(line)
                            .map_err(|e| annotate(e, lineno))?,
                    );
                }
                Section::Positive => pos_lines.push((lineno, line.to_string())),
                Section::Negative => neg_lines.push((lineno, line.to_string())),
            }
        }

        let mut relevance = vec![vec![Relevance::None; aus.len()]; expressions.len()];
        let mut seen_rows = HashSet::new();
        for (lineno, line) in relevance_lines {
            let (expr, cells) = line.split_once(':').ok_or_else(|| {
                Error::Parse(format!("line {lineno}: expected `<expression> : <au>=P|S ...`"))
            })?;
            let expr = expr.trim();
            let row = expressions
                .iter()
                .position(|e| e.eq_ignore_ascii_case(expr))
                .ok_or_else(|| {
                    Error::Validation(format!("line {lineno}: unknown expression `{expr}`"))
                })?;
            if !seen_rows.insert(row) {
                return Err(Error::Validation(format!(
                    "line {lineno}: duplicate relevance row for `{expr}`"
                )));
            }
            for cell in cells.split_whitespace() {
                let (au, level) = cell.split_once('=').ok_or_else(|| {
                    Error::Parse(format!("line {lineno}: relevance cell `{cell}` is not <au>=P|S"))
                })?;
                let col = resolve_au(&aus, au)
                    .ok_or_else(|| Error::Validation(format!("line {lineno}: unknown AU `{au}`")))?;
                relevance[row][col] = match level {
                    "P" | "p" => Relevance::Primary,
                    "S" | "s" => Relevance::Secondary,
                    other => {
                        return Err(Error::Parse(format!(
                            "line {lineno}: relevance level `{other}` must be P or S"
                        )))
                    }
                };
            }
        }

        let positive = parse_pairs(&aus, &pos_lines)?;
        let negative = parse_pairs(&aus, &neg_lines)?;
        KnowledgeBase::new(
            expressions,
            aus,
            relevance,
            levels.unwrap_or_default(),
            positive,
            negative,
        )
    }

    pub fn n_expressions(&self) -> usize {
        self.expressions.len()
    }

    pub fn n_aus(&self) -> usize {
        self.aus.len()
    }

    pub fn expressions(&self) -> &[String] {
        &self.expressions
    }

    pub fn aus(&self) -> &[ActionUnit] {
        &self.aus
    }

    pub fn levels(&self) -> RelevanceLevels {
        self.levels
    }

    pub fn relevance(&self, expression: usize, au: usize) -> Relevance {
        self.relevance[expression][au]
    }

    pub fn expression_index(&self, name: &str) -> Option<usize> {
        self.expressions
            .iter()
            .position(|e| e.eq_ignore_ascii_case(name))
    }

    /// Index of the AU with the given FACS number.
    pub fn au_index(&self, facs: u32) -> Option<usize> {
        self.aus.iter().position(|a| a.facs == facs)
    }

    /// Positive and negative pair sets, each pair as `(min, max)` index.
    pub fn pair_sets(&self) -> (Vec<AuPair>, Vec<AuPair>) {
        (
            self.positive_pairs.iter().copied().collect(),
            self.negative_pairs.iter().copied().collect(),
        )
    }

    /// Prior matrix using the levels stored in the knowledge base.
    pub fn prior(&self) -> PriorMatrix {
        prior_matrix(self, &self.levels).expect("stored levels are validated")
    }
}

/// Maps the three-level relevance table onto probabilities.
pub fn prior_matrix(kb: &KnowledgeBase, levels: &RelevanceLevels) -> Result<PriorMatrix> {
    levels.validate()?;
    let (e, a) = (kb.n_expressions(), kb.n_aus());
    let mut values = Vec::with_capacity(e * a);
    for row in &kb.relevance {
        values.extend(row.iter().map(|&r| levels.value(r)));
    }
    Ok(PriorMatrix {
        values: Tensor::new(vec![e, a], values)?,
    })
}

/// Fixed `E x A` expression-to-AU prior probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    values: Tensor,
}

impl PriorMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, expression: usize, au: usize) -> f64 {
        self.values.at2(expression, au)
    }

    pub fn row(&self, expression: usize) -> &[f64] {
        let a = self.values.shape()[1];
        &self.values.data()[expression * a..(expression + 1) * a]
    }

    pub fn n_expressions(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_aus(&self) -> usize {
        self.values.shape()[1]
    }
}

fn canonical(pairs: impl IntoIterator<Item = AuPair>) -> Result<BTreeSet<AuPair>> {
    let mut out = BTreeSet::new();
    for (i, j) in pairs {
        if i == j {
            return Err(Error::Validation(format!(
                "pair ({i},{j}) repeats an AU index"
            )));
        }
        out.insert((i.min(j), i.max(j)));
    }
    Ok(out)
}

fn annotate(err: Error, lineno: usize) -> Error {
    match err {
        Error::Parse(msg) => Error::Parse(format!("line {lineno}: {msg}")),
        Error::Validation(msg) => Error::Validation(format!("line {lineno}: {msg}")),
        other => other,
    }
}

fn parse_au_decl(line: &str, lineno: usize) -> Result<ActionUnit> {
    let mut parts = line.split_whitespace();
    let (Some(name), Some(num), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Parse(format!(
            "line {lineno}: AU declaration must be `<name> <facs-number>`"
        )));
    };
    let facs = num
        .trim_start_matches("AU")
        .parse()
        .map_err(|_| Error::Parse(format!("line {lineno}: bad FACS number `{num}`")))?;
    Ok(ActionUnit {
        name: name.to_string(),
        facs,
    })
}

fn resolve_au(aus: &[ActionUnit], token: &str) -> Option<usize> {
    let token = token.trim();
    let number = token
        .strip_prefix("AU")
        .or_else(|| token.strip_prefix("au"))
        .unwrap_or(token);
    if let Ok(n) = number.parse::<u32>() {
        return aus.iter().position(|a| a.facs == n);
    }
    aus.iter().position(|a| a.name.eq_ignore_ascii_case(token))
}

fn parse_pairs(aus: &[ActionUnit], lines: &[(usize, String)]) -> Result<Vec<AuPair>> {
    lines
        .iter()
        .map(|(lineno, line)| {
            let (a, b) = line.split_once(',').ok_or_else(|| {
                Error::Parse(format!("line {lineno}: pair must be `<au>,<au>`"))
            })?;
            let i = resolve_au(aus, a)
                .ok_or_else(|| Error::Validation(format!("line {lineno}: unknown AU `{a}`")))?;
            let j = resolve_au(aus, b)
                .ok_or_else(|| Error::Validation(format!("line {lineno}: unknown AU `{b}`")))?;
            if i == j {
                return Err(Error::Validation(format!(
                    "line {lineno}: pair repeats AU `{}`",
                    a.trim()
                )));
            }
            Ok((i, j))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
[expressions]
A
B
[aus]
X 1
Y 2
Z 3
[relevance]
A : AU1=P AU2=S
[positive_pairs]
AU1,AU2
";

    #[test]
    fn builtin_has_seven_expressions_and_twelve_aus() {
        let kb = KnowledgeBase::builtin();
        assert_eq!(kb.n_expressions(), 7);
        assert_eq!(kb.n_aus(), 12);
        let facs: Vec<u32> = kb.aus().iter().map(|a| a.facs).collect();
        assert_eq!(facs, vec![1, 2, 4, 5, 6, 7, 9, 12, 15, 20, 23, 26]);
    }

    #[test]
    fn happy_marks_cheek_raiser_and_lip_corner_puller_primary() {
        let kb = KnowledgeBase::builtin();
        let happy = kb.expression_index("Happy").unwrap();
        assert_eq!(kb.relevance(happy, kb.au_index(6).unwrap()), Relevance::Primary);
        assert_eq!(kb.relevance(happy, kb.au_index(12).unwrap()), Relevance::Primary);
        let sad = kb.expression_index("Sad").unwrap();
        assert_eq!(kb.relevance(sad, kb.au_index(1).unwrap()), Relevance::Primary);
        assert_eq!(kb.relevance(sad, kb.au_index(15).unwrap()), Relevance::Primary);
    }

    #[test]
    fn default_pairs_contain_brow_and_lip_corner_examples() {
        let kb = KnowledgeBase::builtin();
        let (pos, neg) = kb.pair_sets();
        let au = |n| kb.au_index(n).unwrap();
        assert!(pos.contains(&(au(1), au(2))));
        assert!(neg.contains(&(au(12), au(15))));
    }

    #[test]
    fn pair_sets_are_canonical() {
        let text = SMALL.replace("AU1,AU2", "AU2,AU1\n[negative_pairs]\n3,2");
        let kb = KnowledgeBase::parse(&text).unwrap();
        let (pos, neg) = kb.pair_sets();
        assert_eq!(pos, vec![(0, 1)]);
        assert_eq!(neg, vec![(1, 2)]);
        assert!(pos.iter().chain(&neg).all(|&(i, j)| i < j));
    }

    #[test]
    fn empty_pair_sections() {
        let text = SMALL.replace("[positive_pairs]\nAU1,AU2\n", "");
        let kb = KnowledgeBase::parse(&text).unwrap();
        assert_eq!(kb.pair_sets(), (vec![], vec![]));
    }

    #[test]
    fn overlapping_pair_sets_rejected() {
        let text = format!("{SMALL}[negative_pairs]\nAU2,AU1\n");
        let err = KnowledgeBase::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let text = SMALL.replace("B\n", "A\n");
        assert!(matches!(KnowledgeBase::parse(&text), Err(Error::Validation(_))));
        let text = SMALL.replace("Z 3", "X 3");
        assert!(matches!(KnowledgeBase::parse(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_au_and_malformed_lines() {
        let text = SMALL.replace("AU1,AU2", "AU1,AU9");
        assert!(matches!(KnowledgeBase::parse(&text), Err(Error::Validation(_))));
        let text = SMALL.replace("AU1,AU2", "AU1 AU2");
        assert!(matches!(KnowledgeBase::parse(&text), Err(Error::Parse(_))));
        let text = SMALL.replace("AU2=S", "AU2=Q");
        assert!(matches!(KnowledgeBase::parse(&text), Err(Error::Parse(_))));
        let text = SMALL.replace("AU1,AU2", "AU1,AU1");
        assert!(matches!(KnowledgeBase::parse(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn prior_matrix_maps_levels() {
        let kb = KnowledgeBase::builtin();
        let levels = RelevanceLevels::new(0.9, 0.5, 0.05).unwrap();
        let prior = prior_matrix(&kb, &levels).unwrap();
        let happy = kb.expression_index("Happy").unwrap();
        for a in 0..kb.n_aus() {
            let expected = if [6, 12].contains(&kb.aus()[a].facs) { 0.9 } else { 0.05 };
            assert_eq!(prior.get(happy, a), expected);
        }
        let neutral = kb.expression_index("Neutral").unwrap();
        assert!(prior.row(neutral).iter().all(|&v| v == 0.05));
        // primary counts match the relevance table row by row
        for e in 0..kb.n_expressions() {
            let primaries = (0..kb.n_aus())
                .filter(|&a| kb.relevance(e, a) == Relevance::Primary)
                .count();
            let hits = prior.row(e).iter().filter(|&&v| v == 0.9).count();
            assert_eq!(primaries, hits);
        }
        assert_eq!(prior, prior_matrix(&kb, &levels).unwrap());
    }

    #[test]
    fn degenerate_levels_rejected() {
        assert!(matches!(
            RelevanceLevels::new(1.0, 1.0, 1.0),
            Err(Error::Validation(_))
        ));
        assert!(RelevanceLevels::new(1.1, 0.5, 0.0).is_err());
        assert!(RelevanceLevels::parse("primary=0.9 secondary=0.5").is_err());
    }

    #[test]
    fn levels_section_overrides_default() {
        let text = format!("{SMALL}[levels]\nprimary=0.8 secondary=0.4 none=0.1\n");
        let kb = KnowledgeBase::parse(&text).unwrap();
        assert_eq!(kb.levels(), RelevanceLevels::new(0.8, 0.4, 0.1).unwrap());
        assert_eq!(kb.prior().row(0), &[0.8, 0.4, 0.1]);
    }
}
