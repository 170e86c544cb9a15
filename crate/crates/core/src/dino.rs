//! Self-distillation objective: teacher centering and sharpening, multi-view
//! cross-entropy with stop-gradient, and the two exponential moving averages.
//!
//! Centering is stored as the running mean of raw teacher outputs and
//! subtracted from teacher logits before the softmax. The stored vector
//! therefore follows `c <- m c + (1 - m) mean_i g_t(x_i)` literally.

use crate::error::{shape_err, Error, Result};
use crate::nn::ParameterSet;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Center {
    pub c: Tensor,
    pub momentum: f64,
}

impl Center {
    pub fn zeros(k: usize, momentum: f64) -> Result<Self> {
        Self::new(Tensor::zeros(&[k]), momentum)
    }

    pub fn new(c: Tensor, momentum: f64) -> Result<Self> {
        if c.ndim() != 1 {
            return shape_err(format!("center must be a vector, got {:?}", c.shape()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Param(format!("center momentum {momentum} outside [0, 1]")));
        }
        c.check_finite("center")?;
        Ok(Self { c, momentum })
    }

    pub fn dim(&self) -> usize {
        self.c.numel()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperatures {
    pub student: f64,
    pub teacher: f64,
}

impl Temperatures {
    pub fn new(student: f64, teacher: f64) -> Result<Self> {
        if !(student > 0.0 && teacher > 0.0) {
            return Err(Error::Param(format!(
                "temperatures must be positive ({student}, {teacher})"
            )));
        }
        if teacher >= student {
            return Err(Error::Param(format!(
                "teacher temperature {teacher} must be below student temperature {student}"
            )));
        }
        Ok(Self { student, teacher })
    }
}

/// Student and teacher networks plus the centering state.
#[derive(Clone, Debug, PartialEq)]
pub struct DinoState {
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub center: Center,
}

impl DinoState {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ParameterSet, center: Center) -> Self {
        Self {
            teacher: student.clone(),
            student,
            center,
        }
    }
}

fn check_logits(logits: &Tensor, center: &Center) -> Result<usize> {
    if logits.ndim() != 2 || logits.shape()[1] != center.dim() {
        return shape_err(format!(
            "teacher logits {:?} do not match center of size {}",
            logits.shape(),
            center.dim()
        ));
    }
    Ok(logits.shape()[0])
}

/// `softmax((logits - c) / tau_t)` per row.
pub fn teacher_probs(logits: &Tensor, center: &Center, tau_t: f64) -> Result<Tensor> {
    check_logits(logits, center)?;
    let k = center.dim();
    let mut shifted = logits.clone();
    for row in shifted.data_mut().chunks_mut(k) {
        row.iter_mut().zip(center.c.data()).for_each(|(z, c)| *z -= c);
    }
    crate::tensor::softmax_rows(&shifted, tau_t)
}

/// [`teacher_probs`] on a tape value; refuses values that carry gradient history.
pub fn teacher_probs_var(tape: &Tape, logits: Var, center: &Center, tau_t: f64) -> Result<Tensor> {
    if tape.requires_grad(logits) {
        return Err(Error::Contract(
            "teacher logits must be detached from the gradient tape".into(),
        ));
    }
    teacher_probs(tape.value(logits), center, tau_t)
}

/// Ordered `(teacher view, student view)` pairs that contribute to the loss.
pub fn view_pairs(n_teacher: usize, n_student: usize) -> Vec<(usize, usize)> {
    (0..n_teacher)
        .flat_map(|t| (0..n_student).filter(move |&s| s != t).map(move |s| (t, s)))
        .collect()
}

/// Multi-view cross-entropy, averaged over pairs and batch rows.
///
/// `student` stacks all views view-major, `[V·B, K]`; `teacher` holds the
/// probability rows of each global view, `[B, K]` each. Teacher view `i`
/// and student view `i` are the same crop and are not paired.
pub fn dino_loss_stacked(tape: &mut Tape, student: Var, n_views: usize, teacher: &[Tensor], tau_s: f64) -> Result<Var> {
    let shape = tape.shape(student).to_vec();
    if shape.len() != 2 || n_views == 0 || shape[0] % n_views != 0 {
        return shape_err(format!("student logits {shape:?} do not stack {n_views} views"));
    }
    let (b, k) = (shape[0] / n_views, shape[1]);
    if teacher.len() > n_views {
        return Err(Error::Contract(format!(
            "{} teacher views but only {n_views} student views",
            teacher.len()
        )));
    }
    for t in teacher {
        if t.shape() != [b, k] {
            return shape_err(format!("teacher probabilities {:?}, expected [{b}, {k}]", t.shape()));
        }
    }
    let pairs = view_pairs(teacher.len(), n_views);
    if pairs.is_empty() {
        return Err(Error::Contract("no (teacher, student) view pairs to compare".into()));
    }
    // Sum of teacher targets each student view is compared against.
    let mut targets = vec![0.0; n_views * b * k];
    for &(t, s) in &pairs {
        let dst = &mut targets[s * b * k..(s + 1) * b * k];
        dst.iter_mut().zip(teacher[t].data()).for_each(|(d, p)| *d += p);
    }
    let log_p = tape.log_softmax(student, tau_s)?;
    let w = tape.constant(Tensor::new(&shape, targets)?);
    let prod = tape.mul(log_p, w)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / (pairs.len() * b) as f64)
}

/// [`dino_loss_stacked`] over per-view lists of raw logits.
pub fn dino_loss(
    tape: &mut Tape,
    student_logits: &[Var],
    teacher_logits: &[Tensor],
    temps: Temperatures,
    center: &Center,
) -> Result<Var> {
    if student_logits.is_empty() {
        return Err(Error::Contract("no student views".into()));
    }
    let probs = teacher_logits
        .iter()
        .map(|l| teacher_probs(l, center, temps.teacher))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(student_logits, 0)?;
    dino_loss_stacked(tape, stacked, student_logits.len(), &probs, temps.student)
}

/// `c <- m c + (1 - m) * mean over rows of the raw teacher logits`.
pub fn update_center(center: &Center, teacher_logits: &Tensor) -> Result<Center> {
    let rows = check_logits(teacher_logits, center)?;
    if rows == 0 {
        return shape_err("empty teacher batch");
    }
    let k = center.dim();
    let mut mean = vec![0.0; k];
    for row in teacher_logits.data().chunks(k) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let m = center.momentum;
    let c = center
        .c
        .data()
        .iter()
        .zip(&mean)
        .map(|(c, s)| m * c + (1.0 - m) * (s / rows as f64))
        .collect();
    Center::new(Tensor::new(&[k], c)?, m)
}

/// `θ_t <- λ θ_t + (1 - λ) θ_s` for every parameter.
pub fn update_teacher(teacher: &mut ParameterSet, student: &ParameterSet, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Param(format!("teacher momentum {lambda} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Contract("teacher and student parameter sets differ".into()));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        t.data_mut()
            .iter_mut()
            .zip(s.data())
            .for_each(|(t, s)| *t = lambda * *t + (1.0 - lambda) * s);
    }
    Ok(())
}

/// Mean per-row Shannon entropy (nats) of a probability matrix.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let k = probs.shape().last().copied().unwrap_or(1).max(1);
    let rows = probs.numel() / k;
    let total: f64 = probs.data().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    total / rows.max(1) as f64
}
