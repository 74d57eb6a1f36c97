//! Regenerates the bundled synthetic dataset and its embedding table.
//!
//!     cargo run -p veridex-core --example make_fixtures -- fixtures
//!
//! The generator is fully seeded, so committed fixtures are reproducible.

use std::io::Write;

use veridex_core::embedding::write_embedding_table;
use veridex_core::synthetic::two_gaussian_claims;

const COUNT: usize = 600;
const DIM: usize = 16;
const SEPARATION: f64 = 2.0;
const NOISE_STD: f64 = 0.3;
const SEED: u64 = 20240801;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "fixtures".to_string());
    std::fs::create_dir_all(&dir).expect("create fixture dir");

    let claims = two_gaussian_claims(COUNT, DIM, SEPARATION, NOISE_STD, SEED);

    let dataset_path = format!("{dir}/synthetic_claims.jsonl");
    let mut dataset = std::io::BufWriter::new(std::fs::File::create(&dataset_path).unwrap());
    for claim in &claims {
        writeln!(dataset, "{}", serde_json::to_string(&claim.record).unwrap()).unwrap();
    }
    dataset.flush().unwrap();

    let table_path = format!("{dir}/synthetic_embeddings.jsonl");
    let entries: Vec<(String, Vec<f64>)> = claims
        .iter()
        .map(|c| (c.record.id.clone(), c.vector.clone()))
        .collect();
    write_embedding_table(&table_path, DIM, &entries).unwrap();

    println!("wrote {dataset_path} and {table_path} ({COUNT} claims, d={DIM})");
}
