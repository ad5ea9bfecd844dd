//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
mod io;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{
    central_difference, directional_difference, finite_diff_check, finite_diff_report, relative_error,
    GradCheckReport,
};
pub use io::{load_tns, read_tns, save_tns, write_tns};
pub use ops::concat;
pub(crate) use ops::softmax_into;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
