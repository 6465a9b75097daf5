//! Memory-token accounting for a 576-patch encoder and a 10-entry memory.
//!
//! ```text
//! cargo run --example paper_accounting
//! ```

use iqvic::bench::accounting_table;

fn main() -> iqvic::Result<()> {
    print!("{}", accounting_table(576, 10, &[64, 32, 1])?);
    println!();
    print!("{}", accounting_table(16, 4, &[8, 4, 1])?);
    Ok(())
}
