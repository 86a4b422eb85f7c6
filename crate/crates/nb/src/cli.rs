//! Command-line entry point (placeholder while the library comes together).

pub fn main() -> i32 {
    eprintln!("nb: not wired up yet");
    2
}
