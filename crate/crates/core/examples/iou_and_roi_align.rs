//! Box overlap and fixed-size ROI features from a feature grid.

use crowdnms::geometry::{gt_occlusion, roi_align};
use crowdnms::{iou, BBox, FeatureGrid};

fn main() -> crowdnms::Result<()> {
    let a = BBox::new(10.0, 10.0, 40.0, 80.0)?;
    let b = BBox::new(30.0, 14.0, 40.0, 80.0)?;
    let c = BBox::new(200.0, 10.0, 40.0, 80.0)?;
    println!("iou(a, b) = {:.4}", iou(&a, &b));
    println!("iou(a, c) = {:.4}", iou(&a, &c));
    println!("occlusion of a among {{b, c}} = {:.4}", gt_occlusion(&a, [&b, &c]));

    // one channel holding the x coordinate of each cell center, one the y
    let (h, w, stride) = (16, 32, 8.0);
    let mut values = Vec::with_capacity(2 * h * w);
    for ch in 0..2 {
        for gy in 0..h {
            for gx in 0..w {
                values.push(if ch == 0 { gx as f64 } else { gy as f64 });
            }
        }
    }
    let grid = FeatureGrid::new(2, h, w, stride, values)?;
    let roi = roi_align(&grid, &a, 4)?;
    println!("4x4 ROI of a, x channel:");
    for y in 0..4 {
        let row: Vec<String> = (0..4).map(|x| format!("{:6.2}", roi.get(0, y, x))).collect();
        println!("  {}", row.join(" "));
    }
    println!("4x4 ROI of a, y channel:");
    for y in 0..4 {
        let row: Vec<String> = (0..4).map(|x| format!("{:6.2}", roi.get(1, y, x))).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
