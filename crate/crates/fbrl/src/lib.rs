//! Forward-backward (FB) representations for zero-shot offline RL, with
//! value-conservative (VC-FB) and measure-conservative (MC-FB) variants,
//! trained and evaluated end-to-end on a built-in continuous point-mass maze.

pub mod autodiff;
pub mod checkpoint;
pub mod conservative;
pub mod data;
pub mod eval;
pub mod losses;
pub mod maze;
pub mod nets;
