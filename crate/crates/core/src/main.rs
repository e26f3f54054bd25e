fn main() {
    // CLI wiring lands once the pipeline stages exist.
}
