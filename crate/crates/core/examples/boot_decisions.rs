// The boot manager's choice for every combination of application
// integrity and the two backup-register flags.

use fotasim::bootflow::decide;
use fotasim::integrity::CrcOutcome;
use fotasim::nvstore::{BackupRegisters, BootFlag, FlagSlot};

pub fn run_example() {
    println!("{:<10} {:<10} {:<10} {:<18} flags after", "integrity", "app flag", "upd flag", "decision");
    for integrity in [CrcOutcome::Failed, CrcOutcome::Succeeded] {
        for app in [BootFlag::NotEnter, BootFlag::Enter] {
            for upd in [BootFlag::NotEnter, BootFlag::Enter] {
                let mut regs = BackupRegisters::default();
                regs.write_flag(FlagSlot::ApplicationEnter, app);
                regs.write_flag(FlagSlot::UpdaterEnter, upd);
                let d = decide(integrity, &mut regs);
                println!(
                    "{:<10} {:<10} {:<10} {:<18} {:?}/{:?}",
                    format!("{integrity:?}"),
                    format!("{app:?}"),
                    format!("{upd:?}"),
                    format!("{d:?}"),
                    regs.read_flag(FlagSlot::ApplicationEnter),
                    regs.read_flag(FlagSlot::UpdaterEnter)
                );
            }
        }
    }
}

fn main() {
    run_example();
}
