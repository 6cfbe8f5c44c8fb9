fn main() { println!("migrate-bench"); }
