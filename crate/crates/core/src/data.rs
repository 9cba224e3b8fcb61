//! Sequence datasets, CSV ingestion and synthetic generators.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::seeded_rng;
use crate::oracle::Hmm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Sequences of `T_i × d` observations sharing one dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub name: String,
    pub units: String,
    sequences: Vec<DMatrix<f64>>,
    split: Vec<Split>,
}

impl SequenceDataset {
    /// All sequences start in the training split.
    pub fn new(name: impl Into<String>, sequences: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = sequences.first() else {
            return Err(Error::InvalidInput("dataset has no sequences".into()));
        };
        let d = first.ncols();
        if d == 0 {
            return Err(Error::InvalidInput("observations have dimension 0".into()));
        }
        for (i, s) in sequences.iter().enumerate() {
            if s.nrows() == 0 {
                return Err(Error::InvalidInput(format!("sequence {i} is empty")));
            }
            if s.ncols() != d {
                return Err(Error::InvalidInput(format!(
                    "sequence {i} has dimension {}, expected {d}",
                    s.ncols()
                )));
            }
        }
        let split = vec![Split::Train; sequences.len()];
        Ok(Self {
            name: name.into(),
            units: String::new(),
            sequences,
            split,
        })
    }

    pub fn dim(&self) -> usize {
        self.sequences[0].ncols()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[DMatrix<f64>] {
        &self.sequences
    }

    pub fn into_sequences(self) -> Vec<DMatrix<f64>> {
        self.sequences
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    /// Marks the last `⌈fraction · n⌉` sequences as test. A single
    /// sequence is first cut in time at the same fraction.
    pub fn with_test_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidInput(format!("test fraction {fraction} not in [0, 1)")));
        }
        if fraction == 0.0 {
            self.split = vec![Split::Train; self.sequences.len()];
            return Ok(self);
        }
        if self.sequences.len() == 1 {
            let s = self.sequences.pop().expect("one sequence");
            let cut = s.nrows() - ((s.nrows() as f64 * fraction).ceil() as usize).min(s.nrows() - 1);
            if cut == 0 || cut >= s.nrows() {
                return Err(Error::InvalidInput("sequence too short to split".into()));
            }
            self.sequences = vec![s.rows(0, cut).into_owned(), s.rows(cut, s.nrows() - cut).into_owned()];
            self.split = vec![Split::Train, Split::Test];
            return Ok(self);
        }
        let n = self.sequences.len();
        let test = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
        self.split = (0..n).map(|i| if i >= n - test { Split::Test } else { Split::Train }).collect();
        Ok(self)
    }

    fn part(&self, which: Split) -> Vec<DMatrix<f64>> {
        self.sequences
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(m, _)| m.clone())
            .collect()
    }

    pub fn train(&self) -> Vec<DMatrix<f64>> {
        self.part(Split::Train)
    }

    pub fn test(&self) -> Vec<DMatrix<f64>> {
        self.part(Split::Test)
    }

    /// A dataset holding only one split.
    pub fn subset(&self, which: Split) -> Result<Self> {
        let mut out = Self::new(self.name.clone(), self.part(which))?;
        out.units = self.units.clone();
        Ok(out)
    }

    /// All observations stacked row-wise.
    pub fn pooled(&self) -> DMatrix<f64> {
        let rows: usize = self.sequences.iter().map(|s| s.nrows()).sum();
        let mut out = DMatrix::zeros(rows, self.dim());
        let mut r = 0;
        for s in &self.sequences {
            out.rows_mut(r, s.nrows()).copy_from(s);
            r += s.nrows();
        }
        out
    }

    pub fn shortest(&self) -> usize {
        self.sequences.iter().map(|s| s.nrows()).min().unwrap_or(0)
    }
}

/// One observation per line, comma-separated; blank lines separate
/// sequences.
pub fn parse_csv(text: &str, name: &str) -> Result<SequenceDataset> {
    let mut sequences = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let flush = |rows: &mut Vec<Vec<f64>>, sequences: &mut Vec<DMatrix<f64>>| {
        if !rows.is_empty() {
            let d = rows[0].len();
            sequences.push(DMatrix::from_row_iterator(rows.len(), d, rows.drain(..).flatten()));
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            flush(&mut rows, &mut sequences);
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("'{}' is not a number", f.trim()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {w} fields, found {}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    flush(&mut rows, &mut sequences);
    if sequences.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no observations".into(),
        });
    }
    SequenceDataset::new(name, sequences)
}

pub fn to_csv(ds: &SequenceDataset) -> String {
    let mut out = String::new();
    for (i, s) in ds.sequences().iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for row in s.row_iter() {
            let fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
    }
    out
}

pub fn load_csv(path: &Path) -> Result<SequenceDataset> {
    let text = std::fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    parse_csv(&text, name)
}

pub fn save_csv(ds: &SequenceDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(ds))?;
    Ok(())
}

/// Synthetic generators.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    /// Random HMM emitting integer symbols.
    Hmm {
        states: usize,
        symbols: usize,
        length: usize,
        sequences: usize,
    },
    /// Sum of sinusoids per dimension with Gaussian noise; each sequence
    /// has its own random phases.
    NoisyOscillator {
        freqs: Vec<f64>,
        noise: f64,
        dim: usize,
        length: usize,
        sequences: usize,
    },
    /// A hidden two-state chain; observations are noisy copies of the
    /// current state's center.
    BimodalSwitcher {
        length: usize,
        sequences: usize,
        centers: (f64, f64),
        spread: f64,
        switch_prob: f64,
    },
}

impl SyntheticKind {
    pub fn hmm(states: usize, symbols: usize, length: usize) -> Self {
        Self::Hmm {
            states,
            symbols,
            length,
            sequences: 1,
        }
    }

    pub fn oscillator(dim: usize, length: usize, noise: f64) -> Self {
        Self::NoisyOscillator {
            freqs: vec![0.05, 0.13],
            noise,
            dim,
            length,
            sequences: 1,
        }
    }

    pub fn bimodal(length: usize) -> Self {
        Self::BimodalSwitcher {
            length,
            sequences: 1,
            centers: (-1.0, 1.0),
            spread: 0.15,
            switch_prob: 0.35,
        }
    }

    /// Sets the number of independent sequences.
    pub fn with_sequences(mut self, n: usize) -> Self {
        match &mut self {
            Self::Hmm { sequences, .. }
            | Self::NoisyOscillator { sequences, .. }
            | Self::BimodalSwitcher { sequences, .. } => *sequences = n,
        }
        self
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Hmm { .. } => "hmm",
            Self::NoisyOscillator { .. } => "oscillator",
            Self::BimodalSwitcher { .. } => "bimodal",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    /// `hmm:STATES,SYMBOLS,T`, `oscillator:DIM,T,NOISE` or `bimodal:T`,
    /// each optionally followed by `xN` for `N` sequences.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("cannot parse generator '{s}'"));
        let (head, count) = match s.rsplit_once('x') {
            Some((h, n)) if h.contains(':') && n.chars().all(|c| c.is_ascii_digit()) && !n.is_empty() => {
                (h, n.parse::<usize>().map_err(|_| bad())?)
            }
            _ => (s, 1),
        };
        let (kind, args) = head.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let int = |i: usize| -> Result<usize> {
            let v = *nums.get(i).ok_or_else(bad)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(bad());
            }
            Ok(v as usize)
        };
        let k = match (kind, nums.len()) {
            ("hmm", 3) => Self::hmm(int(0)?, int(1)?, int(2)?),
            ("oscillator", 3) => Self::oscillator(int(0)?, int(1)?, nums[2]),
            ("bimodal", 1) => Self::bimodal(int(0)?),
            _ => return Err(bad()),
        };
        Ok(k.with_sequences(count))
    }
}

/// Generated data plus the generating HMM when there is one.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: SequenceDataset,
    pub hmm: Option<Hmm>,
}

pub fn gen_synthetic(kind: &SyntheticKind, seed: u64) -> Result<Generated> {
    let mut rng = seeded_rng(seed);
    let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
    match kind {
        SyntheticKind::Hmm {
            states,
            symbols,
            length,
            sequences,
        } => {
            if *states == 0 || *symbols == 0 || *length == 0 || *sequences == 0 {
                return bad("hmm generator needs positive states, symbols, length and count");
            }
            let hmm = Hmm::random(*states, *symbols, &mut rng);
            let seqs = (0..*sequences)
                .map(|_| {
                    let (_, ys) = hmm.sample(*length, &mut rng);
                    DMatrix::from_iterator(*length, 1, ys.into_iter().map(|y| y as f64))
                })
                .collect();
            let mut dataset = SequenceDataset::new("hmm", seqs)?;
            dataset.units = "symbol".into();
            Ok(Generated {
                dataset,
                hmm: Some(hmm),
            })
        }
        SyntheticKind::NoisyOscillator {
            freqs,
            noise,
            dim,
            length,
            sequences,
        } => {
            if freqs.is_empty() || *dim == 0 || *length == 0 || *sequences == 0 || !(*noise >= 0.0) {
                return bad("oscillator generator needs frequencies, positive sizes and noise >= 0");
            }
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let amp = 1.0 / freqs.len() as f64;
            let seqs = (0..*sequences)
                .map(|_| {
                    let phases = DMatrix::from_fn(*dim, freqs.len(), |_, _| rng.random_range(0.0..2.0 * PI));
                    DMatrix::from_fn(*length, *dim, |t, j| {
                        let clean: f64 = freqs
                            .iter()
                            .enumerate()
                            .map(|(i, f)| amp * (2.0 * PI * f * t as f64 + phases[(j, i)]).sin())
                            .sum();
                        clean
                    })
                    .map(|v| if *noise > 0.0 { v + noise * normal.sample(&mut rng) } else { v })
                })
                .collect();
            Ok(Generated {
                dataset: SequenceDataset::new("oscillator", seqs)?,
                hmm: None,
            })
        }
        SyntheticKind::BimodalSwitcher {
            length,
            sequences,
            centers,
            spread,
            switch_prob,
        } => {
            if *length == 0 || *sequences == 0 || !(*spread >= 0.0) || !(0.0..=1.0).contains(switch_prob) {
                return bad("bimodal generator needs positive length, spread >= 0 and switch_prob in [0, 1]");
            }
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let seqs = (0..*sequences)
                .map(|_| {
                    let mut state = rng.random_bool(0.5);
                    DMatrix::from_fn(*length, 1, |_, _| {
                        if rng.random_bool(*switch_prob) {
                            state = !state;
                        }
                        let c = if state { centers.1 } else { centers.0 };
                        c + spread * normal.sample(&mut rng)
                    })
                })
                .collect();
            Ok(Generated {
                dataset: SequenceDataset::new("bimodal", seqs)?,
                hmm: None,
            })
        }
    }
}

/// Text dump of HMM parameters.
pub fn hmm_to_text(hmm: &Hmm) -> String {
    let mut out = String::new();
    let mut write_matrix = |name: &str, m: &DMatrix<f64>| {
        let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
        for row in m.row_iter() {
            let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", fields.join(" "));
        }
    };
    write_matrix("transition", hmm.transition().entries());
    write_matrix("emission", hmm.emission().entries());
    write_matrix("initial", &DMatrix::from_column_slice(hmm.states(), 1, hmm.initial().as_slice()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shapes() {
        let ds = parse_csv("0.0,1.0\n1.0,0.0", "t").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sequences()[0].shape(), (2, 2));
        let multi = parse_csv("1\n2\n\n3\n4\n5\n", "t").unwrap();
        assert_eq!(multi.len(), 2);
        assert_eq!(multi.sequences()[1].nrows(), 3);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        match parse_csv("1,2\n3,4\n5\n", "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2\n3,x\n", "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = seeded_rng(5);
        let seqs = (0..3)
            .map(|i| DMatrix::from_fn(4 + i, 3, |_, _| rng.random::<f64>() * 1e3 - 500.0))
            .collect();
        let ds = SequenceDataset::new("r", seqs).unwrap();
        let back = parse_csv(&to_csv(&ds), "r").unwrap();
        assert_eq!(back.sequences(), ds.sequences());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&ds, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap().sequences(), ds.sequences());
    }

    #[test]
    fn dataset_validation_and_split() {
        assert!(SequenceDataset::new("e", vec![]).is_err());
        assert!(SequenceDataset::new("e", vec![DMatrix::zeros(0, 1)]).is_err());
        assert!(SequenceDataset::new("e", vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 2)]).is_err());
        let one = SequenceDataset::new("s", vec![DMatrix::zeros(100, 1)]).unwrap();
        let split = one.with_test_fraction(0.2).unwrap();
        assert_eq!(split.train()[0].nrows(), 80);
        assert_eq!(split.test()[0].nrows(), 20);
        let many = SequenceDataset::new("m", vec![DMatrix::zeros(3, 1); 5]).unwrap();
        let s = many.with_test_fraction(0.2).unwrap();
        assert_eq!((s.train().len(), s.test().len()), (4, 1));
    }

    #[test]
    fn generators_are_deterministic() {
        let k = SyntheticKind::hmm(2, 2, 100);
        let a = gen_synthetic(&k, 3).unwrap();
        let b = gen_synthetic(&k, 3).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.hmm, b.hmm);
        assert!(a.hmm.is_some());
        assert_ne!(gen_synthetic(&k, 4).unwrap().dataset, a.dataset);
    }

    #[test]
    fn clean_oscillator_is_periodic() {
        let kind = SyntheticKind::NoisyOscillator {
            freqs: vec![0.25, 0.125],
            noise: 0.0,
            dim: 2,
            length: 64,
            sequences: 1,
        };
        let g = gen_synthetic(&kind, 1).unwrap();
        let s = &g.dataset.sequences()[0];
        for t in 0..56 {
            for j in 0..2 {
                assert!((s[(t, j)] - s[(t + 8, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bimodal_histogram_peaks_at_centers() {
        let ds = gen_synthetic(&SyntheticKind::bimodal(20_000), 2).unwrap().dataset;
        let lo = -2.0;
        let width = 0.1;
        let mut hist = vec![0usize; 40];
        for &v in ds.sequences()[0].iter() {
            let b = ((v - lo) / width).floor();
            if (0.0..40.0).contains(&b) {
                hist[b as usize] += 1;
            }
        }
        let center = |b: usize| lo + (b as f64 + 0.5) * width;
        let left = (0..20).max_by_key(|&b| hist[b]).unwrap();
        let right = (20..40).max_by_key(|&b| hist[b]).unwrap();
        assert!((center(left) + 1.0).abs() <= 0.1, "{}", center(left));
        assert!((center(right) - 1.0).abs() <= 0.1, "{}", center(right));
        assert!(hist[20] * 4 < hist[left]);
    }

    #[test]
    fn generator_spec_parsing() {
        assert_eq!("hmm:2,2,100".parse::<SyntheticKind>().unwrap(), SyntheticKind::hmm(2, 2, 100));
        assert_eq!(
            "bimodal:50x3".parse::<SyntheticKind>().unwrap(),
            SyntheticKind::bimodal(50).with_sequences(3)
        );
        assert!("hmm:2,2".parse::<SyntheticKind>().is_err());
        assert!("walk:3".parse::<SyntheticKind>().is_err());
        assert!(gen_synthetic(&SyntheticKind::hmm(0, 2, 10), 0).is_err());
    }
}
