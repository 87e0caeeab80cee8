//! Grain classes and the pluggable classifiers that stand in for the
//! trained classification network.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GrainClass {
    Good,
    Yellow,
    Broken,
    Peeled,
    Dotted,
    /// Foreign objects. Also accepted under the alias "Refuse".
    Reject,
}

impl GrainClass {
    pub const ALL: [GrainClass; NUM_CLASSES] = [
        GrainClass::Good,
        GrainClass::Yellow,
        GrainClass::Broken,
        GrainClass::Peeled,
        GrainClass::Dotted,
        GrainClass::Reject,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GrainClass::Good => "Good",
            GrainClass::Yellow => "Yellow",
            GrainClass::Broken => "Broken",
            GrainClass::Peeled => "Peeled",
            GrainClass::Dotted => "Dotted",
            GrainClass::Reject => "Reject",
        }
    }

    /// Only Good grains stay on the belt.
    pub fn should_eject(self) -> bool {
        self != GrainClass::Good
    }
}

impl fmt::Display for GrainClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GrainClass {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "refuse" {
            return Ok(GrainClass::Reject);
        }
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(&lower))
            .ok_or_else(|| ClassifierError::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("unknown grain class {0:?}")]
    UnknownClass(String),
    #[error("confusion matrix row {row} ({class}): {reason}")]
    Invalid {
        row: usize,
        class: GrainClass,
        reason: String,
    },
    #[error("confusion matrix file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("mixture is empty")]
    EmptyMixture,
    #[error("fixture constraints infeasible: {0}")]
    Infeasible(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Row-stochastic matrix: entry `(t, p)` is P(predicted p | true t).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    rows: [[f64; NUM_CLASSES]; NUM_CLASSES],
}

const ROW_TOLERANCE: f64 = 1e-9;

impl ConfusionMatrix {
    /// Wraps rows without checking them; see [`ConfusionMatrix::validate`].
    pub fn from_rows(rows: [[f64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { rows }
    }

    pub fn identity() -> Self {
        let mut rows = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { rows }
    }

    pub fn rows(&self) -> &[[f64; NUM_CLASSES]; NUM_CLASSES] {
        &self.rows
    }

    pub fn row(&self, class: GrainClass) -> &[f64; NUM_CLASSES] {
        &self.rows[class.index()]
    }

    pub fn get(&self, truth: GrainClass, predicted: GrainClass) -> f64 {
        self.rows[truth.index()][predicted.index()]
    }

    /// Checks nonnegativity and unit row sums, reporting the first bad row.
    pub fn validate(&self) -> Result<(), ClassifierError> {
        for (i, row) in self.rows.iter().enumerate() {
            let class = GrainClass::ALL[i];
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(ClassifierError::Invalid {
                    row: i,
                    class,
                    reason: format!("entry {v} is negative or non-finite"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(ClassifierError::Invalid {
                    row: i,
                    class,
                    reason: format!("row sums to {sum}"),
                });
            }
        }
        Ok(())
    }

    /// Parses the plain-text fixture format: six rows of six decimals in
    /// canonical class order, `#` comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, ClassifierError> {
        let mut rows = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        let mut filled = 0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let line_no = lineno + 1;
            if filled == NUM_CLASSES {
                return Err(ClassifierError::Parse {
                    line: line_no,
                    reason: "more than six rows".into(),
                });
            }
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != NUM_CLASSES {
                return Err(ClassifierError::Parse {
                    line: line_no,
                    reason: format!("expected 6 columns, found {}", values.len()),
                });
            }
            for (slot, v) in rows[filled].iter_mut().zip(values) {
                *slot = v.parse().map_err(|_| ClassifierError::Parse {
                    line: line_no,
                    reason: format!("not a number: {v:?}"),
                })?;
            }
            filled += 1;
        }
        if filled != NUM_CLASSES {
            return Err(ClassifierError::Parse {
                line: text.lines().count(),
                reason: format!("expected 6 rows, found {filled}"),
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let text = std::fs::read_to_string(path).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Renders the fixture format with a comment header.
    pub fn to_text(&self, header: &str) -> String {
        let mut out = String::new();
        for line in header.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("# rows/cols: Good Yellow Broken Peeled Dotted Reject\n");
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Grain counts per class, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mixture(pub [u32; NUM_CLASSES]);

impl Mixture {
    /// 50 Good grains and 10 of every defect class.
    pub const REFERENCE: Mixture = Mixture([50, 10, 10, 10, 10, 10]);

    pub fn count(&self, class: GrainClass) -> u32 {
        self.0[class.index()]
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn scaled(&self, k: u32) -> Mixture {
        Mixture(self.0.map(|c| c * k))
    }
}

impl Default for Mixture {
    fn default() -> Self {
        Self::REFERENCE
    }
}

/// Probability that the keep/eject rule routes a grain correctly, averaged
/// over the mixture: Good grains must be predicted Good, defects anything else.
pub fn expected_separation_accuracy(
    m: &ConfusionMatrix,
    mixture: &Mixture,
) -> Result<f64, ClassifierError> {
    let total = mixture.total();
    if total == 0 {
        return Err(ClassifierError::EmptyMixture);
    }
    let correct: f64 = GrainClass::ALL
        .iter()
        .map(|&t| {
            let n = f64::from(mixture.count(t));
            let p_good = m.get(t, GrainClass::Good);
            if t == GrainClass::Good {
                n * p_good
            } else {
                n * (1.0 - p_good)
            }
        })
        .sum();
    Ok(correct / f64::from(total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutcome {
    pub predicted: GrainClass,
    pub class_probs: [f64; NUM_CLASSES],
}

/// Stand-in for the classification network.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)] // built once per run
pub enum Classifier {
    /// Always right; one-hot probabilities.
    Oracle,
    /// Samples the prediction from the confusion row of the true class.
    Confusion(ConfusionMatrix),
}

impl Classifier {
    pub fn confusion(m: ConfusionMatrix) -> Result<Self, ClassifierError> {
        m.validate()?;
        Ok(Classifier::Confusion(m))
    }

    /// The calibrated matrix shipped with the crate.
    pub fn calibrated() -> Self {
        Classifier::Confusion(calibrated_fixture())
    }

    pub fn classify<R: Rng + ?Sized>(&self, truth: GrainClass, rng: &mut R) -> ClassifierOutcome {
        match self {
            Classifier::Oracle => {
                let mut class_probs = [0.0; NUM_CLASSES];
                class_probs[truth.index()] = 1.0;
                ClassifierOutcome {
                    predicted: truth,
                    class_probs,
                }
            }
            Classifier::Confusion(m) => {
                let row = m.row(truth);
                let predicted = sample_row(row, rng.random::<f64>());
                // Half one-hot, half calibrated row: the sampled class is
                // always the strict argmax and the vector still sums to one.
                let mut class_probs = row.map(|p| 0.5 * p);
                class_probs[predicted.index()] += 0.5;
                ClassifierOutcome {
                    predicted,
                    class_probs,
                }
            }
        }
    }
}

/// Inverse-CDF draw from a probability row; `u` in [0, 1).
fn sample_row(row: &[f64; NUM_CLASSES], u: f64) -> GrainClass {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in row.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return GrainClass::ALL[i];
            }
        }
    }
    // Rounding left u above the accumulated mass.
    GrainClass::ALL[last_positive]
}

/// Text of the committed calibrated fixture.
pub const CALIBRATED_FIXTURE: &str = include_str!("../fixtures/calibrated.cm");

pub fn calibrated_fixture() -> ConfusionMatrix {
    ConfusionMatrix::parse(CALIBRATED_FIXTURE).expect("committed fixture parses")
}

/// Constraints the calibrated fixture must satisfy.
pub mod fixture_constraints {
    pub const MIN_STRONG_DIAGONAL: f64 = 0.94;
    pub const TARGET_ACCURACY: f64 = 0.872;
    pub const ACCURACY_LOW: f64 = 0.867;
    pub const ACCURACY_HIGH: f64 = 0.877;
}

/// Checks the fixture constraints, returning a description of the first
/// violation.
pub fn check_fixture_constraints(m: &ConfusionMatrix) -> Result<(), String> {
    use fixture_constraints::*;
    use GrainClass::*;

    m.validate().map_err(|e| e.to_string())?;
    for class in [Good, Yellow, Broken, Reject] {
        let d = m.get(class, class);
        if d < MIN_STRONG_DIAGONAL {
            return Err(format!("{class} diagonal {d} below {MIN_STRONG_DIAGONAL}"));
        }
    }
    for (class, partner) in [(Peeled, Dotted), (Dotted, Peeled)] {
        let d = m.get(class, class);
        if d >= MIN_STRONG_DIAGONAL {
            return Err(format!("{class} diagonal {d} not below {MIN_STRONG_DIAGONAL}"));
        }
        let to_partner = m.get(class, partner);
        let strongest_other = GrainClass::ALL
            .iter()
            .filter(|c| **c != class && **c != partner)
            .map(|c| m.get(class, *c))
            .fold(0.0, f64::max);
        if to_partner <= strongest_other {
            return Err(format!(
                "{class} confuses more with another class than with {partner}"
            ));
        }
    }
    let acc = expected_separation_accuracy(m, &Mixture::REFERENCE).map_err(|e| e.to_string())?;
    if !(ACCURACY_LOW..=ACCURACY_HIGH).contains(&acc) {
        return Err(format!(
            "expected separation accuracy {acc} outside [{ACCURACY_LOW}, {ACCURACY_HIGH}]"
        ));
    }
    Ok(())
}

/// Builds the calibrated fixture.
///
/// The four well-separated classes sit exactly on the 0.94 diagonal floor.
/// Peeled and Dotted put a fixed share on each other and a leak `g` into
/// Good; `g` is found by bisection so the expected separation accuracy on
/// the reference mixture hits 0.872, then every entry is rounded to six
/// decimals with the diagonal absorbing the rounding.
pub fn calibrate_fixture() -> Result<ConfusionMatrix, ClassifierError> {
    use fixture_constraints::*;

    const STRONG: f64 = MIN_STRONG_DIAGONAL;
    // Peeled <-> Dotted share exceeds the Good leak by this margin.
    const PARTNER_MARGIN: f64 = 0.03;
    const MINOR: f64 = 0.002;

    let build = |leak: f64| -> ConfusionMatrix {
        let mut rows = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        // Good: remaining mass spread over defect classes.
        rows[0] = [STRONG, 0.015, 0.015, 0.01, 0.01, 0.01];
        // Yellow, Broken, Reject: most errors read as Good.
        rows[1] = [0.05, STRONG, 0.004, MINOR, MINOR, MINOR];
        rows[2] = [0.05, 0.004, STRONG, MINOR, MINOR, MINOR];
        rows[5] = [0.05, MINOR, 0.004, MINOR, MINOR, STRONG];
        let partner = leak + PARTNER_MARGIN;
        let minor_total = 3.0 * MINOR;
        let diag = 1.0 - leak - partner - minor_total;
        rows[3] = [leak, MINOR, MINOR, diag, partner, MINOR];
        rows[4] = [leak, MINOR, MINOR, partner, diag, MINOR];
        ConfusionMatrix::from_rows(rows)
    };
    let accuracy = |leak: f64| {
        expected_separation_accuracy(&build(leak), &Mixture::REFERENCE).expect("nonempty mixture")
    };

    // Accuracy decreases in the leak; bracket it so the Peeled/Dotted
    // diagonal stays nonnegative.
    let mut lo = 0.0;
    let mut hi = (1.0 - PARTNER_MARGIN - 3.0 * MINOR) / 2.0;
    if accuracy(lo) < TARGET_ACCURACY || accuracy(hi) > TARGET_ACCURACY {
        return Err(ClassifierError::Infeasible(format!(
            "target {TARGET_ACCURACY} outside [{}, {}]",
            accuracy(hi),
            accuracy(lo)
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if accuracy(mid) > TARGET_ACCURACY {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let raw = build(0.5 * (lo + hi));

    let mut rows = *raw.rows();
    for (i, row) in rows.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = (*v * 1e6).round() / 1e6;
        }
        let off: f64 = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| *v)
            .sum();
        row[i] = ((1.0 - off) * 1e6).round() / 1e6;
    }
    let m = ConfusionMatrix::from_rows(rows);
    check_fixture_constraints(&m).map_err(ClassifierError::Infeasible)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_index_round_trip() {
        for (i, c) in GrainClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(GrainClass::from_index(i), Some(*c));
            assert_eq!(c.name().parse::<GrainClass>().unwrap(), *c);
        }
        assert_eq!("Refuse".parse::<GrainClass>().unwrap(), GrainClass::Reject);
        assert!("Purple".parse::<GrainClass>().is_err());
        assert_eq!(GrainClass::from_index(6), None);
    }

    #[test]
    fn validate_cases() {
        assert!(ConfusionMatrix::identity().validate().is_ok());

        let mut rows = *ConfusionMatrix::identity().rows();
        rows[3][3] = 0.9;
        match ConfusionMatrix::from_rows(rows).validate() {
            Err(ClassifierError::Invalid { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected violation, got {other:?}"),
        }

        let mut rows = *ConfusionMatrix::identity().rows();
        rows[1] = [-0.1, 1.1, 0.0, 0.0, 0.0, 0.0];
        match ConfusionMatrix::from_rows(rows).validate() {
            Err(ClassifierError::Invalid { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn unvalidated_matrix_rejected() {
        let mut rows = *ConfusionMatrix::identity().rows();
        rows[0][0] = 0.5;
        assert!(Classifier::confusion(ConfusionMatrix::from_rows(rows)).is_err());
    }

    #[test]
    fn oracle_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = Classifier::Oracle.classify(GrainClass::Broken, &mut rng);
        assert_eq!(out.predicted, GrainClass::Broken);
        assert_eq!(out.class_probs, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_matrix_never_errs() {
        let clf = Classifier::confusion(ConfusionMatrix::identity()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            for c in GrainClass::ALL {
                assert_eq!(clf.classify(c, &mut rng).predicted, c);
            }
        }
    }

    #[test]
    fn sampled_class_is_argmax() {
        let clf = Classifier::calibrated();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            for c in GrainClass::ALL {
                let out = clf.classify(c, &mut rng);
                assert_eq!(crate::geometry::argmax(&out.class_probs), out.predicted.index());
                let sum: f64 = out.class_probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn good_rate_law_of_large_numbers() {
        let mut rows = *ConfusionMatrix::identity().rows();
        rows[0] = [0.9, 0.02, 0.02, 0.02, 0.02, 0.02];
        let clf = Classifier::confusion(ConfusionMatrix::from_rows(rows)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let good = (0..n)
            .filter(|_| clf.classify(GrainClass::Good, &mut rng).predicted == GrainClass::Good)
            .count();
        let rate = good as f64 / n as f64;
        assert!((rate - 0.9).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn expected_accuracy_fixtures() {
        let id = ConfusionMatrix::identity();
        assert_eq!(expected_separation_accuracy(&id, &Mixture([3, 0, 1, 0, 0, 7])).unwrap(), 1.0);

        let mut rows = [[0.0; 6]; 6];
        rows[0] = [0.9, 0.1, 0.0, 0.0, 0.0, 0.0];
        for (t, row) in rows.iter_mut().enumerate().skip(1) {
            row[0] = 0.1;
            row[t] = 0.9;
        }
        let m = ConfusionMatrix::from_rows(rows);
        let acc = expected_separation_accuracy(&m, &Mixture::REFERENCE).unwrap();
        assert!((acc - 0.90).abs() < 1e-12);

        assert!(matches!(
            expected_separation_accuracy(&id, &Mixture([0; 6])),
            Err(ClassifierError::EmptyMixture)
        ));
    }

    #[test]
    fn committed_fixture_matches_calibration() {
        let generated = calibrate_fixture().unwrap();
        assert_eq!(generated, calibrated_fixture());
        check_fixture_constraints(&generated).unwrap();
        let acc = expected_separation_accuracy(&generated, &Mixture::REFERENCE).unwrap();
        assert!((acc - 0.872).abs() <= 0.005, "accuracy {acc}");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            ConfusionMatrix::parse("1 0 0 0 0 0\n"),
            Err(ClassifierError::Parse { .. })
        ));
        assert!(matches!(
            ConfusionMatrix::parse("# c\n1 0 0 0 0\n"),
            Err(ClassifierError::Parse { line: 2, .. })
        ));
        let text = ConfusionMatrix::identity().to_text("identity");
        assert_eq!(ConfusionMatrix::parse(&text).unwrap(), ConfusionMatrix::identity());
    }
}
