//! Planted-structure synthetic data.
//!
//! Each sample draws an expression uniformly, switches each AU on with the
//! prior probability for that expression, and emits
//! `x = c_y + Σ_a on_a · μ · u_a + ε` with unit directions `c_y`, `u_a` and
//! Gaussian noise `ε ~ N(0, σ² I)`. The planted AU activations are kept for
//! diagnostics only.
//!
//! File format:
//!
//! ```text
//! AUECRL-DATA v1 n=<n> dim=<d> E=<E> A=<A>
//! y=<int>
//! au=<A space-separated 0/1>
//! x=<d space-separated floats>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::knowledge::PriorMatrix;

const MAGIC: &str = "AUECRL-DATA v1";

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_samples: usize,
    pub input_dim: usize,
    pub n_expr: usize,
    pub n_aus: usize,
    /// AU signal strength μ.
    pub signal_strength: f64,
    /// Noise standard deviation σ.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_samples: 2000,
            input_dim: 32,
            n_expr: 7,
            n_aus: 12,
            signal_strength: 0.5,
            noise_std: 0.05,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        if self.n_expr == 0 || self.n_aus == 0 {
            return Err(Error::config("E and A must be positive"));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::config("signal strength must be a finite value >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise std must be a finite value >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub au_truth: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub n_expr: usize,
    pub n_aus: usize,
    pub samples: Vec<SynthSample>,
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// The planted class and AU directions for a configuration.
pub fn directions(cfg: &GenConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    directions_from(&mut rng, cfg)
}

fn directions_from(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let classes = (0..cfg.n_expr).map(|_| unit_direction(rng, cfg.input_dim)).collect();
    let aus = (0..cfg.n_aus).map(|_| unit_direction(rng, cfg.input_dim)).collect();
    (classes, aus)
}

pub fn generate(cfg: &GenConfig, prior: &PriorMatrix) -> Result<Dataset> {
    cfg.validate()?;
    if prior.n_expressions() != cfg.n_expr || prior.n_aus() != cfg.n_aus {
        return Err(Error::config(format!(
            "prior is {}x{} but the generator is configured for E={} A={}",
            prior.n_expressions(),
            prior.n_aus(),
            cfg.n_expr,
            cfg.n_aus
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (classes, aus) = directions_from(&mut rng, cfg);
    let mu = cfg.signal_strength;
    let sigma = cfg.noise_std;

    let samples = (0..cfg.n_samples)
        .map(|_| {
            let y = rng.random_range(0..cfg.n_expr);
            let au_truth: Vec<u8> = (0..cfg.n_aus)
                .map(|a| u8::from(rng.random::<f64>() < prior.get(y, a)))
                .collect();
            let mut x = classes[y].clone();
            for (a, &on) in au_truth.iter().enumerate() {
                if on == 1 {
                    for (xi, ui) in x.iter_mut().zip(&aus[a]) {
                        *xi += mu * ui;
                    }
                }
            }
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += sigma * z;
            }
            SynthSample { x, y, au_truth }
        })
        .collect();

    Ok(Dataset {
        input_dim: cfg.input_dim,
        n_expr: cfg.n_expr,
        n_aus: cfg.n_aus,
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples and the rest, sharing the same planted directions.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        let part = |s: &[SynthSample]| Dataset {
            input_dim: self.input_dim,
            n_expr: self.n_expr,
            n_aus: self.n_aus,
            samples: s.to_vec(),
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_expr];
        for s in &self.samples {
            h[s.y] += 1;
        }
        h
    }

    /// Checks every sample against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != self.input_dim || s.au_truth.len() != self.n_aus {
                return Err(Error::shape(format!("record {i} has inconsistent dimensions")));
            }
            if s.y >= self.n_expr {
                return Err(Error::Validation(format!("record {i}: label {} >= E", s.y)));
            }
            if s.au_truth.iter().any(|&a| a > 1) {
                return Err(Error::Validation(format!("record {i}: AU truth must be 0/1")));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics(format!("record {i}: non-finite input")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{MAGIC} n={} dim={} E={} A={}",
            self.samples.len(),
            self.input_dim,
            self.n_expr,
            self.n_aus
        );
        for s in &self.samples {
            let _ = writeln!(out, "y={}", s.y);
            out.push_str("au=");
            push_joined(&mut out, s.au_truth.iter());
            out.push_str("\nx=");
            // `Display` for f64 is the shortest string that parses back exactly.
            push_joined(&mut out, s.x.iter());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))?;
        let rest = header
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Parse(format!("bad dataset header `{header}`")))?;
        let (mut n, mut dim, mut e, mut a) = (None, None, None, None);
        for tok in rest.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field `{tok}`")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Parse(format!("bad header value `{tok}`")))?;
            match k {
                "n" => n = Some(v),
                "dim" => dim = Some(v),
                "E" => e = Some(v),
                "A" => a = Some(v),
                _ => return Err(Error::Parse(format!("unknown header field `{k}`"))),
            }
        }
        let (Some(n), Some(dim), Some(n_expr), Some(n_aus)) = (n, dim, e, a) else {
            return Err(Error::Parse("header needs n=, dim=, E= and A=".into()));
        };

        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut field = |key: &str| -> Result<&str> {
                let line = lines.next().ok_or_else(|| {
                    Error::Parse(format!(
                        "record {i}: file truncated, header declares {n} records"
                    ))
                })?;
                line.strip_prefix(key)
                    .ok_or_else(|| Error::Parse(format!("record {i}: expected `{key}` line")))
            };
            let y: usize = field("y=")?
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("record {i}: bad label")))?;
            let au_truth = parse_list::<u8>(field("au=")?, i, "au")?;
            let x = parse_list::<f64>(field("x=")?, i, "x")?;
            if au_truth.len() != n_aus || x.len() != dim {
                return Err(Error::Parse(format!(
                    "record {i}: expected {n_aus} AU flags and {dim} inputs, got {} and {}",
                    au_truth.len(),
                    x.len()
                )));
            }
            samples.push(SynthSample { x, y, au_truth });
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse(format!(
                "more records than the {n} declared in the header"
            )));
        }
        let ds = Dataset {
            input_dim: dim,
            n_expr,
            n_aus,
            samples,
        };
        ds.validate().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(ds)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn push_joined<T: std::fmt::Display>(out: &mut String, items: impl Iterator<Item = T>) {
    for (k, v) in items.enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, record: usize, what: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Parse(format!("record {record}: bad {what} value `{t}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{KnowledgeBase, RelevanceLevels};

    fn small_cfg() -> GenConfig {
        GenConfig {
            n_samples: 50,
            input_dim: 8,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let prior = KnowledgeBase::builtin().prior();
        let a = generate(&small_cfg(), &prior).unwrap();
        let b = generate(&small_cfg(), &prior).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn noiseless_samples_sit_on_class_direction() {
        let prior = KnowledgeBase::builtin().prior();
        let cfg = GenConfig {
            signal_strength: 0.0,
            noise_std: 0.0,
            ..small_cfg()
        };
        let ds = generate(&cfg, &prior).unwrap();
        let (classes, _) = directions(&cfg);
        for s in &ds.samples {
            assert_eq!(s.x, classes[s.y]);
        }
    }

    #[test]
    fn certain_prior_row_turns_every_au_on() {
        let text = "[expressions]\nOn\nOff\n[aus]\nA 1\nB 2\nC 3\n[levels]\nprimary=1 secondary=0.5 none=0\n[relevance]\nOn : AU1=P AU2=P AU3=P\n";
        let kb = KnowledgeBase::parse(text).unwrap();
        assert_eq!(kb.levels(), RelevanceLevels::new(1.0, 0.5, 0.0).unwrap());
        let cfg = GenConfig {
            n_samples: 200,
            n_expr: 2,
            n_aus: 3,
            ..small_cfg()
        };
        let ds = generate(&cfg, &kb.prior()).unwrap();
        for s in &ds.samples {
            let expected = if s.y == 0 { 1 } else { 0 };
            assert!(s.au_truth.iter().all(|&a| a == expected));
        }
    }

    #[test]
    fn zero_samples_is_config_error() {
        let prior = KnowledgeBase::builtin().prior();
        let cfg = GenConfig {
            n_samples: 0,
            ..small_cfg()
        };
        let err = generate(&cfg, &prior).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains('n')), "{err}");
    }

    #[test]
    fn parse_errors_name_the_record() {
        let prior = KnowledgeBase::builtin().prior();
        let ds = generate(&small_cfg(), &prior).unwrap();
        let text = ds.to_text();
        let lines: Vec<&str> = text.lines().collect();
        // header + 3 lines per record; cut inside record 4
        let truncated = lines[..1 + 3 * 4 + 2].join("\n");
        let err = Dataset::parse(&truncated).unwrap_err();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("record 4")), "{err}");

        let header_mismatch = text.replacen("n=50", "n=49", 1);
        assert!(matches!(Dataset::parse(&header_mismatch), Err(Error::Parse(_))));
        let bad_magic = text.replacen("AUECRL-DATA v1", "AUECRL-DATA v2", 1);
        assert!(matches!(Dataset::parse(&bad_magic), Err(Error::Parse(_))));
    }
}
