//! Draws one block mask and shows how it looks at each encoder stage.
//!
//! ```text
//! cargo run --example block_masking -- [grid] [keep_ratio] [seed]
//! ```

use convmae::masking::{alignment_check, generate_block_mask, visible_count, MaskGrid};

fn show(title: &str, grid: &MaskGrid) {
    println!("{title} ({}x{}, {} masked)", grid.h, grid.w, grid.masked_count());
    for r in 0..grid.h {
        let row: String = (0..grid.w).map(|c| if grid.get(r, c) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let grid: usize = args.first().map_or(Ok(4), |s| s.parse())?;
    let keep: f64 = args.get(1).map_or(Ok(0.25), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(7), |s| s.parse())?;

    let set = generate_block_mask(grid, grid, keep, seed)?;
    println!(
        "keep {keep} of {} tokens -> {} visible: {:?}\n",
        grid * grid,
        visible_count(grid * grid, keep),
        set.visible3
    );
    show("stage 3, stride 16", &set.grid3);
    show("stage 2, stride 8", &set.grid2);
    show("stage 1, stride 4", &set.grid1);
    println!("\nstages aligned: {}", alignment_check(&set, [4, 2, 2]));
    Ok(())
}
