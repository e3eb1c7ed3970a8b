//! Cut a frame into patch tokens, inspect the layout, and put it back.

use vicon::patching::{Channel, ChannelMask, Frame, UNION_CHANNELS};

fn main() {
    let mask = ChannelMask::from_channels(&[Channel::VelocityX, Channel::VelocityY, Channel::Scalar]);
    let (nx, ny) = (8, 8);
    let mut frame = Frame::zeros(nx, ny, mask);
    for x in 0..nx {
        for y in 0..ny {
            frame.set(x, y, Channel::Scalar.index(), (x * ny + y) as f32);
            frame.set(x, y, Channel::VelocityX.index(), 1.0);
        }
    }

    let grid = frame.patchify(4, 4).expect("grid divisible by patch size");
    let layout = grid.layout;
    println!(
        "{nx}x{ny} frame, {} channels -> {} patches of length {}",
        UNION_CHANNELS,
        layout.num_patches(),
        layout.patch_len()
    );
    for k in 0..layout.num_patches() {
        let scalar: Vec<f32> = grid
            .patch(k)
            .iter()
            .skip(Channel::Scalar.index())
            .step_by(UNION_CHANNELS)
            .copied()
            .collect();
        println!("patch {k}: scalar values {scalar:?}");
    }

    let back = vicon::patching::unpatchify(&grid).expect("consistent layout");
    assert_eq!(back, frame.values());
    println!("unpatchify restores the frame exactly");
}
