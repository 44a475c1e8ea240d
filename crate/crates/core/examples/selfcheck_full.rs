fn main() {
    let reports = fedanchor_core::selfcheck::run_all();
    for r in &reports {
        println!("{}", r.line());
    }
    std::process::exit(if fedanchor_core::selfcheck::all_passed(&reports) { 0 } else { 1 });
}
