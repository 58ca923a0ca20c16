//! Specification spaces, designs and query regions.

use bayes_emu::space::{Interval, Region, SpecSpace};

fn main() -> bayes_emu::Result<()> {
    let toy = SpecSpace::toy();
    for d in toy.dims() {
        println!("{:<4} [{}, {}] {:?}", d.name, d.lower, d.upper, d.kind);
    }

    let lattice = toy.lattice_design(&[5, 7])?;
    println!("lattice: {} points, first {:?}, last {:?}", lattice.len(), lattice.points[0], lattice.points[34]);

    let river = SpecSpace::river();
    let lhs = river.maximin_lhs(20, 100, 1)?;
    println!("river LHS: {} points in {} dims", lhs.len(), river.dim());
    println!("scaled first point: {:?}", river.scale_to_unit(&lhs.points[0])?);

    let case3 = Region::Box {
        intervals: vec![Interval::new(0.5, 1.9), Interval::fixed(0.72)],
    };
    case3.validate(&toy)?;
    let grid = case3.grid(5, 0)?;
    println!("case-3 grid: {grid:?}");

    let half = Region::HalfEllipsoid {
        center: vec![1.0, 0.0],
        semi_axes: vec![0.3, 0.4],
        positive_dim: 1,
    };
    let pts = half.grid(200, 1)?;
    println!("half-ellipse: {} points, all inside: {}", pts.len(), pts.iter().all(|p| half.contains(p).unwrap_or(false)));

    let outside = Region::Point { x: vec![3.0, 0.5] };
    println!("out-of-range region: {}", outside.validate(&toy).unwrap_err());
    Ok(())
}
