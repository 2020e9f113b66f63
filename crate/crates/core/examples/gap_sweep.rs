//! Performance gap of the optimal rule over the spread-ratio / prior-ratio
//! grid of the mixed task, and over the near-cluster weight of the local task.

use imbalance_lab::oracle::{corollary_grid, local_gap};

fn main() -> imbalance_lab::Result<()> {
    let ks = [1.5, 2.0, 3.0, 5.0];
    let vs = [1.0, 2.0, 5.0, 10.0];
    let grid = corollary_grid(&ks, &vs, 2, 5.0, 1.0)?;
    print!("{:>6}", "K \\ V");
    for v in vs {
        print!("{v:>10}");
    }
    println!();
    for (i, k) in ks.iter().enumerate() {
        print!("{k:>6}");
        for j in 0..vs.len() {
            match grid.get(i, j) {
                Some(g) => print!("{g:>10.2e}"),
                None => print!("{:>10}", "-"),
            }
        }
        println!();
    }
    println!("pattern violations: {}", grid.violations(1e-10).len());

    for g in local_gap(1.0, &[0.05, 0.1, 0.2, 0.3, 0.45])? {
        println!(
            "α = {:.2}: threshold {:+.3}, sub-cluster gap {:.5}",
            g.alpha, g.threshold, g.gap
        );
    }
    Ok(())
}
