// Backup-register flags across resets, and the application metadata
// record stored at the end of the application region.

use fotasim::flash::FlashLayout;
use fotasim::nvstore::{
    app_capacity, max_image_len, metadata_region, AppMetadata, BackupRegisters, BootFlag, FlagSlot,
};

pub fn run_example() {
    let mut regs = BackupRegisters::default();
    regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::Enter);
    let soft = regs.clone();
    regs.power_cycle();
    println!(
        "updater flag after software reset {:?}, after power cycle {:?}",
        soft.read_flag(FlagSlot::UpdaterEnter),
        regs.read_flag(FlagSlot::UpdaterEnter)
    );

    let layout = FlashLayout::stm32f401();
    let region = metadata_region(&layout);
    println!(
        "metadata at {:#x}, region capacity {} bytes, largest image with 1 KiB blocks {} bytes",
        region.start,
        app_capacity(&layout),
        max_image_len(&layout, 1024)
    );

    let image = vec![0x5Au8; 10_000];
    let meta = AppMetadata::for_image(&image, 1024).unwrap();
    let bytes = meta.encode().unwrap();
    println!(
        "{} bytes, CRC {:#010X}, {} blocks -> {} encoded bytes",
        meta.byte_count,
        meta.image_crc,
        meta.block_table.len(),
        bytes.len()
    );
    assert_eq!(AppMetadata::decode(&bytes).unwrap(), meta);
}

fn main() {
    run_example();
}
