fn main() {
    accent_ge2e::cli::main()
}
