//! Searches for replay fixture seeds.
//!
//! Usage: search_replay [first_seed] [start] [attempts] [threads]

use ethicrowd_core::simulator::search_replay_seeds;

fn main() {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let first_seed = args.first().copied().unwrap_or(2024);
    let start = args.get(1).copied().unwrap_or(0);
    let attempts = args.get(2).copied().unwrap_or(20_000);
    let threads = args.get(3).copied().unwrap_or(8) as usize;
    let t = std::time::Instant::now();
    match search_replay_seeds(first_seed, start, attempts, threads) {
        Ok(Some(f)) => println!("found {f:?} in {:.1?}", t.elapsed()),
        Ok(None) => println!("no fixture in {attempts} attempts ({:.1?})", t.elapsed()),
        Err(e) => println!("error: {e}"),
    }
}
