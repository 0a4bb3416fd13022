//! Natural cubic spline basis for follow-up time, as used by `ns(x, df)`
//! terms in model formulas.

use trialforge::design::{natural_spline_basis, SplineBasisSpec};

fn main() -> trialforge::error::Result<()> {
    let followup: Vec<f64> = (0..10).map(f64::from).collect();
    let spec = SplineBasisSpec::from_data(&followup, 3)?;
    println!(
        "interior knots {:?}, boundary {:?}",
        spec.interior_knots, spec.boundary_knots
    );

    // beyond the boundary knots the basis continues linearly
    let grid: Vec<f64> = (-2..=12).map(f64::from).collect();
    let b = natural_spline_basis(&grid, &spec)?;
    println!("{:>5} {:>9} {:>9} {:>9}", "x", "ns1", "ns2", "ns3");
    for (i, x) in grid.iter().enumerate() {
        println!("{x:>5} {:>9.4} {:>9.4} {:>9.4}", b[(i, 0)], b[(i, 1)], b[(i, 2)]);
    }
    Ok(())
}
