//! Synthetic referring scenes: generation, target rendering, mask extraction
//! and dataset round trip.

use denoise_perception::toytask::{extract_mask, Dataset, Example, Mask, MaskExtractionConfig, TaskConfig};

fn ascii(mask: &Mask) -> String {
    (0..mask.height())
        .map(|y| (0..mask.width()).map(|x| if mask.get(y, x) { '#' } else { '.' }).collect::<String>())
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() -> denoise_perception::Result<()> {
    let task = TaskConfig::default();
    let ex = Example::generate(&task, 42)?;
    println!("condition: {}", ex.condition);
    for (i, o) in ex.scene.objects.iter().enumerate() {
        let marker = if i == ex.target { " <- referred" } else { "" };
        println!("  object {i}: {o:?}{marker}");
    }
    println!("{}\n", ascii(&ex.mask));

    let extracted = extract_mask(&ex.target_image(), &MaskExtractionConfig::with_delta(task.mask_delta)?)?;
    println!("mask recovered from the rendered target: IoU {:.3}", extracted.iou(&ex.mask)?);
    println!("RLE: {:?}", ex.mask.to_rle());

    let data = Dataset::generate(&task, 7, 0, 256)?;
    println!("{} of {} scenes are hard", data.hard_subset().len(), data.len());

    let dir = std::env::temp_dir().join("toy_scenes_example");
    data.save(&dir)?;
    let back = Dataset::load(&dir)?;
    println!("saved and reloaded {} scenes from {}: identical = {}", back.len(), dir.display(), back == data);
    Ok(())
}
