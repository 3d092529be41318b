fn main() { println!("{}", mtvssl::Config::default().to_pretty_json()); }
