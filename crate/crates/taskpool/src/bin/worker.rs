fn main() {
    if let Err(e) = dfno_taskpool::worker::main_with_args(std::env::args().skip(1)) {
        eprintln!("taskpool-worker: {e}");
        std::process::exit(2);
    }
}
