//! Writes demo datasets for manual CLI runs.

use tsbench::synthetic;
use tsbench::tsf::serialize_tsf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map(String::as_str).unwrap_or("demo.tsf");
    let name = args.get(2).map(String::as_str).unwrap_or("demo");
    let period: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(12);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(42);
    let ds = synthetic::seasonal_dataset(name, 20, 220, period, 0.2, seed);
    std::fs::write(out, serialize_tsf(&ds)).unwrap();
    eprintln!("wrote {out}: {} series", ds.series.len());
}
