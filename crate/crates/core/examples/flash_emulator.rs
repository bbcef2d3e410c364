// Sectored flash: unlock keys, erase-before-program, timing, and what a
// reset in the middle of a program leaves behind.

use fotasim::flash::{FlashDevice, FlashError, ERASED};
use fotasim::time::SimDuration;

pub fn run_example() {
    let mut flash = FlashDevice::stm32f401();
    let app = flash.layout().regions.application;
    println!("{} KiB device, application region {:#x}..{:#x}", flash.size() / 1024, app.start, app.end());

    assert_eq!(flash.erase_sectors(5, 1), Err(FlashError::LockedDevice));
    flash.unlock_default().unwrap();
    let erase = flash.erase_sectors(5, 1).unwrap();
    println!("erase sector 5: {} ms", erase.as_micros() / 1000);
    flash.settle();

    let program = flash.program(app.start, &[0x11; 1024]).unwrap();
    println!("program 1 KiB: {} us", program.as_micros());
    flash.settle();
    let again = flash.program(app.start, &[0x22; 4]);
    println!("reprogram without erase: {again:?}");
    assert!(matches!(again, Err(FlashError::ProgramOnNonErased { .. })));

    // Start a 1 KiB program and cut power a quarter of the way through.
    let at = app.start + 4096;
    let started = flash.now();
    let cost = flash.program(at, &[0x33; 1024]).unwrap();
    flash.advance_to(started + SimDuration::from_micros(cost.as_micros() / 4));
    flash.interrupt();
    let cells = flash.read_slice(at, 1024).unwrap();
    let kept = cells.iter().take_while(|&&b| b == 0x33).count();
    println!("interrupted program kept {kept} bytes, rest erased: {}", cells[kept..].iter().all(|&b| b == ERASED));
    assert!(kept > 0 && kept < 1024);
}

fn main() {
    run_example();
}
