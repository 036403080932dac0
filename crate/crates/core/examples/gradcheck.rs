//! Finite-difference checks of every differentiable component in 64-bit.

use modse::gradcheck::{run_all, GradcheckOptions, Scale};

fn main() -> modse::Result<()> {
    let opts = GradcheckOptions {
        scale: Scale::Micro,
        seed: 0,
        corrupt: false,
    };
    for suite in run_all(&opts)? {
        println!("{suite}");
    }
    Ok(())
}
