// The silent bootloader updater, run cleanly and with a failure injected
// at each step. The bootloader always ends up whole: old or new.

use fotasim::bootflow::{updater_silent, UpdaterStep};
use fotasim::flash::{FlashDevice, ERASED};
use fotasim::nvstore::{BackupRegisters, BootFlag, FlagSlot};

fn install(flash: &mut FlashDevice, image: &[u8]) {
    let bl = flash.layout().regions.bootloader;
    flash.unlock_default().unwrap();
    flash.erase_sectors(flash.layout().sector_containing(bl.start).unwrap().index, 1).unwrap();
    flash.program(bl.start, image).unwrap();
    flash.lock();
    flash.settle();
}

pub fn run_example() {
    let old = vec![0x0Au8; 20 * 1024];
    let new = vec![0x0Bu8; 28 * 1024];
    for inject in [
        None,
        Some(UpdaterStep::Backup),
        Some(UpdaterStep::Program),
        Some(UpdaterStep::Verify),
        Some(UpdaterStep::Finalize),
    ] {
        let mut flash = FlashDevice::stm32f401();
        install(&mut flash, &old);
        let mut regs = BackupRegisters::default();
        regs.write_flag(FlagSlot::UpdaterEnter, BootFlag::Enter);
        let result = updater_silent(&mut flash, &mut regs, &new, inject);
        let bl = flash.layout().regions.bootloader;
        let region = flash.read_slice(bl.start, bl.size).unwrap();
        let used = region.iter().rposition(|&b| b != ERASED).map_or(0, |p| p + 1);
        let which = match region[0] {
            0x0A => "old",
            0x0B => "new",
            _ => "?",
        };
        println!(
            "inject {:<16} -> {:<40} bootloader {which} ({used} bytes), updater flag {:?}",
            format!("{inject:?}"),
            match &result {
                Ok(s) => format!("ok, {} sectors erased", s.sectors_erased),
                Err(e) => e.to_string(),
            },
            regs.read_flag(FlagSlot::UpdaterEnter)
        );
        assert!(region[..used].iter().all(|&b| b == region[0]));
    }
}

fn main() {
    run_example();
}
