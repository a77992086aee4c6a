use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::rms_norm;
use crate::param::ParamStore;
use crate::tensor::Element;

use super::{Model, NORM_EPS};

/// Frozen teacher with the student's mixers riding alongside each attention layer.
///
/// Only the student's mixer parameters are ever placed on the tape, so only they
/// can receive gradients. The rest of the student store is carried along so it
/// can be handed to the later steps unchanged.
#[derive(Clone, Debug)]
pub struct AlignmentModel<T: Element> {
    pub teacher: Model<T>,
    pub student: Model<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerAlignment {
    pub mixer_in: Var,
    pub teacher_out: Var,
    pub student_out: Var,
}

pub struct AlignmentOutput {
    pub teacher_logits: Var,
    pub layers: Vec<LayerAlignment>,
}

impl<T: Element> AlignmentModel<T> {
    pub fn new(teacher: &Model<T>, student: Model<T>) -> Result<Self> {
        if teacher.layers.len() != student.layers.len() {
            return Err(Error::config(format!(
                "teacher has {} layers but {} student mixers were supplied",
                teacher.layers.len(),
                student.layers.len()
            )));
        }
        let mut teacher = teacher.clone();
        teacher.store.freeze_all();
        Ok(AlignmentModel { teacher, student })
    }

    pub fn forward(&self, tape: &mut Tape<T>, ids: &[u32], batch: usize) -> Result<AlignmentOutput> {
        self.forward_in(&self.student.store, tape, ids, batch)
    }

    /// As [`AlignmentModel::forward`] with student parameters read from `student_store`.
    pub fn forward_in(
        &self,
        student_store: &ParamStore<T>,
        tape: &mut Tape<T>,
        ids: &[u32],
        batch: usize,
    ) -> Result<AlignmentOutput> {
        let t = &self.teacher;
        let mut h = t.embed_tokens(tape, &t.store, ids, batch)?;
        let mut layers = Vec::with_capacity(t.layers.len());
        let (mut tv0, mut sv0) = (None, None);
        for (i, (tl, sl)) in t.layers.iter().zip(&self.student.layers).enumerate() {
            let nw = tape.param(&t.store, tl.attn_norm);
            let n = rms_norm(tape, h, nw, NORM_EPS)?;
            let teacher_out = tl.mixer.forward(tape, &t.store, n, None, tv0)?;
            let student_out = sl.mixer.forward(tape, student_store, n, None, sv0)?;
            if i == 0 {
                tv0 = teacher_out.v0;
                sv0 = student_out.v0;
            }
            layers.push(LayerAlignment { mixer_in: n, teacher_out: teacher_out.out, student_out: student_out.out });
            h = tape.add(h, teacher_out.out)?;
            h = t.mlp_block(tape, &t.store, tl, h)?;
        }
        let teacher_logits = t.head(tape, &t.store, h)?;
        Ok(AlignmentOutput { teacher_logits, layers })
    }

    /// Hands back the student with its aligned mixers.
    pub fn into_student(self) -> Model<T> {
        self.student
    }
}
