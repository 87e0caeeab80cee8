//! Rebuilds `fixtures/calibrated.cm` from the calibration procedure.

use lentil_sort::classifier::{calibrate_fixture, expected_separation_accuracy, Mixture};

fn main() {
    let m = match calibrate_fixture() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    let acc = expected_separation_accuracy(&m, &Mixture::REFERENCE).expect("nonempty mixture");
    let header = format!(
        "Calibrated confusion matrix, expected separation accuracy {acc:.6} on 50/10/10/10/10/10."
    );
    print!("{}", m.to_text(&header));
}
