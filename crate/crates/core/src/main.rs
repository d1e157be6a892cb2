fn main() {
    std::process::exit(lidar_evs::cli::main());
}
