use crate::detector::{ModelState, StateError};
use crate::real::Real;

/// `θt ← α·θt + (1−α)·θs` for every entry, batch-norm running statistics
/// included. `α = 1` leaves the teacher untouched and `α = 0` copies the
/// student, both exactly.
pub fn ema_update<R: Real>(teacher: &mut ModelState<R>, student: &ModelState<R>, alpha: f64) -> Result<(), StateError> {
    teacher.check_compatible(student)?;
    if alpha == 1.0 {
        return Ok(());
    }
    if alpha == 0.0 {
        for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
            t.data_mut().copy_from_slice(s.data());
        }
        return Ok(());
    }
    let (a, b) = (R::from_f64(alpha), R::from_f64(1.0 - alpha));
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}
