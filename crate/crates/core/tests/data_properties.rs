//! Corpus-level properties of the synthetic generator and bucketing.

use ctcmix_core::data::{generate_dataset, partition_by_width, prepare_lines, GenConfig};
use ctcmix_core::NetworkConfig;

fn corpus(lines: usize) -> (Vec<ctcmix_core::PreparedLine>, NetworkConfig) {
    let g = GenConfig {
        lines,
        val_fraction: 0.01,
        seed: 21,
        ..GenConfig::default()
    };
    let (tr, _) = generate_dataset(&g).unwrap();
    let net = NetworkConfig::tiny(&g.alphabet);
    let vocab = net.vocab().unwrap();
    (prepare_lines(&tr, net.input_height, &vocab).unwrap(), net)
}

#[test]
fn bucketed_batches_have_similar_widths() {
    let (lines, _) = corpus(10_200);
    assert!(lines.len() >= 10_000);
    let widths: Vec<usize> = lines.iter().map(|l| l.width).collect();
    let worst = partition_by_width(&widths, 8)
        .unwrap()
        .iter()
        .map(|b| {
            let ws: Vec<usize> = b.iter().map(|&i| widths[i]).collect();
            *ws.iter().max().unwrap() as f64 / *ws.iter().min().unwrap() as f64
        })
        .fold(0.0, f64::max);
    assert!(worst < 1.5, "worst width ratio {worst}");
}

#[test]
fn padded_batches_leave_room_for_every_alignment() {
    let (lines, net) = corpus(10_200);
    let widths: Vec<usize> = lines.iter().map(|l| l.width).collect();
    let mut fits = 0;
    for batch in partition_by_width(&widths, 8).unwrap() {
        let w_pad = batch.iter().map(|&i| widths[i]).max().unwrap();
        let frames = net.output_length(w_pad).unwrap();
        fits += batch
            .iter()
            .filter(|&&i| frames >= 2 * lines[i].labels.len() + 1)
            .count();
    }
    let share = fits as f64 / lines.len() as f64;
    assert!(share >= 0.99, "only {share} of lines fit 2S+1 frames");
}
