//! Neighbourhood imbalance on the hand-built fixture and on a random graph
//! with per-class heterophily targets.

use imbalance_lab::metrics::ldi;
use imbalance_lab::taskgen::{neighborhood_fixture, toy_graph};
use imbalance_lab::{Purpose, RngStream};

fn main() -> imbalance_lab::Result<()> {
    let fixture = ldi(&neighborhood_fixture())?;
    println!("fixture node values {:.3?}", fixture.per_node);

    let targets = [0.1, 0.3, 0.6];
    let g = toy_graph(300, &targets, &mut RngStream::new(0, Purpose::Graph))?;
    let r = ldi(&g)?;
    for (c, (got, want)) in r.per_class.iter().zip(targets).enumerate() {
        println!("class {c}: mean neighbourhood index {got:.3} (target {want})");
    }
    Ok(())
}
