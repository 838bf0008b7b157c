//! Prints the route selected on every point of the ridge grid for the eight worked cases.

fn main() -> symcert::Result<()> {
    for rep in symcert::worked_cases::run_all()? {
        let routes: Vec<&str> = rep.routes.iter().map(|r| r.map_or("-", |r| r.label())).collect();
        println!(
            "{} stable={:?} expected={} b_sharp={:.4} b_rho={:.4} edges={} test_edges={} | {}",
            rep.name,
            rep.stable_route,
            rep.expected_route,
            rep.b_sharp,
            rep.b_rho,
            rep.edges,
            rep.test_edges,
            routes.join(" ")
        );
    }
    Ok(())
}
