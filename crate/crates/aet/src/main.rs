fn main() {
    aet::cli::noop();
}
