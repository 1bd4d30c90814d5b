fn main() {
    msvar::cli::main()
}
