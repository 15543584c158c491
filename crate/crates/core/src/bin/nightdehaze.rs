fn main() {
    std::process::exit(nightdehaze::pipeline::cli::cli_dispatch(std::env::args_os()));
}
