//! Cohort statistics of per-case values: mean, sample standard deviation,
//! median and interpolated quartiles.
//!
//! ```text
//! cargo run --example cohort_summary -- values.csv
//! ```
//!
//! Without an argument it summarizes a built-in list of per-case initial
//! landmark errors (mm) from a 20-case validation cohort.

use defreg::eval::{cohort_summary, parse_values};

const DEMO: [f64; 20] = [
    13.5, 14.0, 16.0, 15.0, 17.0, 17.0, 1.5, 3.5, 9.0, 4.0, 3.0, 5.0, 2.0, 2.0, 2.0, 7.0, 10.0, 4.5, 6.0, 4.0,
];

fn main() -> defreg::Result<()> {
    let values = match std::env::args().nth(1) {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| defreg::Error::io(&path, e))?;
            parse_values(&text)?
        }
        None => DEMO.to_vec(),
    };
    let s = cohort_summary(&values)?;
    println!("n        {}", s.n);
    println!("mean     {:.3}", s.mean);
    println!("stddev   {:.3}", s.stddev);
    println!("median   {:.3}", s.median);
    println!("q25      {:.3}", s.q25);
    println!("q75      {:.3}", s.q75);
    Ok(())
}
