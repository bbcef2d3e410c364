// CRC-32/MPEG-2 over a whole image and per 1 KiB block.

use fotasim::integrity::{block_crcs, crc32, Crc32, DEFAULT_BLOCK_SIZE};

pub fn run_example() {
    let check = crc32(b"123456789");
    println!("check value {check:#010X}");
    assert_eq!(check, 0x0376_E6E7);

    let mut streaming = Crc32::new();
    streaming.update(b"12345");
    streaming.update(b"6789");
    assert_eq!(streaming.finish(), check);

    let image: Vec<u8> = (0..5000u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 24) as u8).collect();
    let table = block_crcs(&image, DEFAULT_BLOCK_SIZE).unwrap();
    println!(
        "{} bytes -> {} block CRCs, last block {} bytes",
        image.len(),
        table.len(),
        image.len() % DEFAULT_BLOCK_SIZE
    );
    for (i, c) in table.entries.iter().enumerate() {
        println!("  block {i}: {c:#010X}");
    }
}

fn main() {
    run_example();
}
