// Build a block-level delta between two images, round-trip it through the
// package encoding, and apply it.

use fotasim::delta::{apply_delta, build_delta_default, DeltaPackage};

pub fn run_example() {
    let old: Vec<u8> = (0..64 * 1024u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 13) as u8).collect();
    let mut new = old.clone();
    new[1500..1520].fill(0xAB);
    new[40_000] ^= 0xFF;
    new.extend_from_slice(&[0x5A; 700]);

    let pkg = build_delta_default(&old, &new).unwrap();
    let bytes = pkg.encode();
    let decoded = DeltaPackage::decode(&bytes).unwrap();
    assert_eq!(decoded, pkg);
    for e in &pkg.entries {
        let runs: Vec<String> = e.tuples.iter().map(|t| format!("{}+{}", t.offset, t.data.len())).collect();
        println!("block {:>3}: {}", e.block_index, runs.join(" "));
    }
    let s = pkg.stats();
    println!(
        "{} of {} blocks changed, package {} bytes vs image {} bytes (ratio {:.3})",
        s.blocks_changed,
        pkg.block_count(),
        s.package_bytes,
        s.full_image_bytes,
        s.reduction_ratio
    );
    assert_eq!(apply_delta(&old, &decoded).unwrap(), new);
}

fn main() {
    run_example();
}
