use crate::error::{Error, Result};
use crate::mixers::Mixer;
use crate::tensor::Element;

use super::{Model, ModelSpec};

/// How student attention projections are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Q/K/V/O copied from the teacher.
    Teacher,
    /// Fresh initialization for Q/K/V/O; everything outside the mixers is still copied.
    DeNovo,
}

/// Student built on the teacher's skeleton with its mixers swapped.
pub fn transfer_attention_weights<T: Element>(
    teacher: &Model<T>,
    student_spec: &ModelSpec,
    mode: TransferMode,
    seed: u64,
) -> Result<Model<T>> {
    let ts = &teacher.spec;
    if ts.n_layers != student_spec.n_layers
        || ts.d_model != student_spec.d_model
        || ts.n_q_heads != student_spec.n_q_heads
        || ts.n_kv_heads != student_spec.n_kv_heads
        || ts.d_head != student_spec.d_head
        || ts.vocab_size != student_spec.vocab_size
        || ts.mlp_hidden != student_spec.mlp_hidden
    {
        return Err(Error::config("student spec does not share the teacher's layer count, widths and head layout"));
    }
    let mut student = Model::<T>::init(student_spec.clone(), seed)?;

    let names: Vec<String> = student.store.names().filter(|n| !Model::<T>::is_mixer_param(n)).map(String::from).collect();
    for name in names {
        copy(teacher, &mut student, &name, &name)?;
    }
    if mode == TransferMode::Teacher {
        for i in 0..student.layers.len() {
            for (own, theirs) in Mixer::transfer_map(student_spec.mixer_kind) {
                let own = format!("layers.{i}.mixer.{own}");
                let theirs = format!("layers.{i}.mixer.{theirs}");
                copy(teacher, &mut student, &own, &theirs)?;
            }
        }
    }
    Ok(student)
}

fn copy<T: Element>(teacher: &Model<T>, student: &mut Model<T>, own: &str, theirs: &str) -> Result<()> {
    let src = teacher
        .store
        .by_name(theirs)
        .ok_or_else(|| Error::config(format!("teacher has no parameter {theirs}")))?;
    let dst = student
        .store
        .by_name(own)
        .ok_or_else(|| Error::config(format!("student has no parameter {own}")))?;
    if src.value.shape() != dst.value.shape() {
        return Err(Error::config(format!(
            "shape mismatch in projection {own}: teacher {theirs} is {:?}, student expects {:?}",
            src.value.shape(),
            dst.value.shape()
        )));
    }
    let v = src.value.clone();
    student.store.assign(own, v)
}

/// Teacher-initialized student of the given mixer kind.
pub fn build_student<T: Element>(teacher: &Model<T>, student_spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    transfer_attention_weights(teacher, student_spec, TransferMode::Teacher, seed)
}
