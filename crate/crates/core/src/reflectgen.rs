//! Generation, feedback, reflection and refinement loop that curates the
//! reflection-bearing training records.

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, DecodeRequest};
use crate::tasks::{self, Record, TaskError, TaskFamily, TaskInstance};
use crate::vocab::{self, Token, Vocab};

/// Reflection rounds allowed per task.
pub const MAX_ITERS: usize = 4;

#[derive(Debug, Error)]
pub enum ReflectError {
    #[error("no tasks to curate")]
    NoTasks,
    #[error("reflection requested for a passing attempt on {0}")]
    NotFailed(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

pub type Result<T> = std::result::Result<T, ReflectError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Detail {
    pub expected: Vec<Token>,
    pub produced: Vec<Token>,
    /// First answer position where the two disagree.
    pub first_diff: Option<usize>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Feedback {
    pub verdict: Verdict,
    pub detail: Detail,
}

impl Feedback {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

pub trait Actor {
    /// Answer tokens for a question, with an optional reflection in the hint
    /// slot.
    fn act(&self, question: &[Token], reflection: Option<&[Token]>) -> Result<Vec<Token>>;
}

pub trait Reflector {
    fn reflect(&self, task: &TaskInstance, feedback: &Feedback) -> Result<Vec<Token>>;
}

pub trait Environment {
    fn evaluate(&self, task: &TaskInstance, produced: &[Token]) -> Result<Feedback>;
}

/// Prompt with the reflection in the hint slot, ending before the answer cue.
pub fn prompt(question: &[Token], reflection: Option<&[Token]>) -> Result<Vec<Token>> {
    Ok(tasks::prompt_tokens(question, reflection)?)
}

/// Greedy decoding with the frozen backbone after the `=` cue.
pub struct BackboneActor<'a> {
    pub model: &'a Backbone,
    pub max_new: usize,
}

impl<'a> BackboneActor<'a> {
    pub fn new(model: &'a Backbone) -> Self {
        BackboneActor {
            model,
            max_new: tasks::SEQ_DIGITS + 2,
        }
    }
}

impl Actor for BackboneActor<'_> {
    fn act(&self, question: &[Token], reflection: Option<&[Token]>) -> Result<Vec<Token>> {
        let p = prompt(question, reflection)?;
        let out = self.model.decode_with_cache(&DecodeRequest {
            query: &p,
            units: None,
            cue: &[vocab::EQUALS],
            max_new: self.max_new,
        })?;
        Ok(out.tokens)
    }
}

/// Exact-match grading against the stored answer.
pub struct TaskEnvironment;

impl Environment for TaskEnvironment {
    fn evaluate(&self, task: &TaskInstance, produced: &[Token]) -> Result<Feedback> {
        TaskFamily::get(task.family)?;
        let span = tasks::answer_span(produced);
        let first_diff = (0..task.answer.len().max(span.len()))
            .find(|&i| task.answer.get(i) != span.get(i));
        let note = span.is_empty().then(|| "empty answer".to_string());
        Ok(Feedback {
            verdict: if tasks::grade(&task.answer, produced) {
                Verdict::Pass
            } else {
                Verdict::Fail
            },
            detail: Detail {
                expected: task.answer.clone(),
                produced: span.to_vec(),
                first_diff,
                note,
            },
        })
    }
}

/// Emits the family's rule hint, pointing at the first wrong position.
pub struct ScriptedReflector;

impl Reflector for ScriptedReflector {
    fn reflect(&self, task: &TaskInstance, feedback: &Feedback) -> Result<Vec<Token>> {
        if feedback.passed() {
            return Err(ReflectError::NotFailed(task.id.clone()));
        }
        Ok(tasks::oracle_hint(task.family, feedback.detail.first_diff)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CurationStats {
    pub tasks: usize,
    pub solved_first: usize,
    pub solved_with_reflection: usize,
    pub discarded: usize,
}

/// Run act, evaluate, reflect, act for each task with up to `max_iters`
/// reflection rounds. Tasks solved unaided are left out; unsolved ones are
/// dropped.
pub fn curate_dataset(
    tasks: &[TaskInstance],
    actor: &dyn Actor,
    reflector: &dyn Reflector,
    env: &dyn Environment,
    max_iters: usize,
) -> Result<(Vec<Record>, CurationStats)> {
    if tasks.is_empty() {
        return Err(ReflectError::NoTasks);
    }
    let v = Vocab::get();
    let mut records = Vec::new();
    let mut stats = CurationStats {
        tasks: tasks.len(),
        ..Default::default()
    };
    for task in tasks {
        let first = actor.act(&task.question, None)?;
        let mut feedback = env.evaluate(task, &first)?;
        if feedback.passed() {
            stats.solved_first += 1;
            continue;
        }
        let mut solved = false;
        for round in 1..=max_iters {
            let reflection = reflector.reflect(task, &feedback)?;
            let answer = actor.act(&task.question, Some(&reflection))?;
            feedback = env.evaluate(task, &answer)?;
            if feedback.passed() {
                let mut rec = Record::from_task(task)?;
                rec.reflection = v.render(&reflection).map_err(TaskError::from)?;
                rec.answer = v.render(tasks::answer_span(&answer)).map_err(TaskError::from)?;
                rec.iterations = round;
                records.push(rec);
                solved = true;
                break;
            }
        }
        if solved {
            stats.solved_with_reflection += 1;
        } else {
            stats.discarded += 1;
        }
    }
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_family_dataset, DatasetConfig};
    use std::cell::Cell;

    fn sample() -> Vec<TaskInstance> {
        generate_family_dataset(&DatasetConfig {
            families: 3,
            per_family: 10,
            digit_pool: 5,
            seed: 1,
        })
        .unwrap()
        .train
    }

    struct AlwaysWrong;
    impl Actor for AlwaysWrong {
        fn act(&self, _: &[Token], _: Option<&[Token]>) -> Result<Vec<Token>> {
            Ok(vec![vocab::digit(0); 3])
        }
    }

    /// Answers correctly once it has been given `needed` reflections.
    struct SlowLearner {
        needed: usize,
        seen: Cell<usize>,
    }
    impl Actor for SlowLearner {
        fn act(&self, q: &[Token], r: Option<&[Token]>) -> Result<Vec<Token>> {
            if r.is_some() {
                self.seen.set(self.seen.get() + 1);
            }
            if self.seen.get() >= self.needed {
                Ok(tasks::solve(q).unwrap())
            } else {
                Ok(Vec::new())
            }
        }
    }

    #[test]
    fn feedback_cases() {
        let t = &sample()[0];
        let env = TaskEnvironment;
        assert!(env.evaluate(t, &t.answer).unwrap().passed());
        let mut wrong = t.answer.clone();
        wrong[2] = if wrong[2] == vocab::digit(0) { vocab::digit(1) } else { vocab::digit(0) };
        let fb = env.evaluate(t, &wrong).unwrap();
        assert_eq!(fb.verdict, Verdict::Fail);
        assert_eq!(fb.detail.first_diff, Some(2));
        let fb = env.evaluate(t, &[]).unwrap();
        assert_eq!(fb.detail.note.as_deref(), Some("empty answer"));
        let mut unknown = t.clone();
        unknown.family = 99;
        assert!(env.evaluate(&unknown, &t.answer).is_err());
    }

    #[test]
    fn reflections_name_the_rule_and_position() {
        let t = &sample()[0];
        let env = TaskEnvironment;
        let fb = env.evaluate(t, &[vocab::digit(9)]).unwrap();
        let r = ScriptedReflector.reflect(t, &fb).unwrap();
        assert_eq!(r, ScriptedReflector.reflect(t, &fb).unwrap());
        let text = Vocab::get().render(&r).unwrap();
        let rule = TaskFamily::get(t.family).unwrap().rule;
        assert!(text.contains(&format!("add {} mod", rule.offset)));
        assert!(text.contains(&format!("pos {}", fb.detail.first_diff.unwrap())));
        let ok = env.evaluate(t, &t.answer).unwrap();
        assert!(ScriptedReflector.reflect(t, &ok).is_err());
    }

    #[test]
    fn always_failing_actor_discards_everything() {
        let tasks = sample();
        let (recs, stats) =
            curate_dataset(&tasks, &AlwaysWrong, &ScriptedReflector, &TaskEnvironment, MAX_ITERS).unwrap();
        assert!(recs.is_empty());
        assert_eq!(stats.discarded, tasks.len());
    }

    #[test]
    fn iterations_count_reflection_rounds() {
        let tasks = &sample()[..1];
        let actor = SlowLearner {
            needed: 2,
            seen: Cell::new(0),
        };
        let (recs, stats) =
            curate_dataset(tasks, &actor, &ScriptedReflector, &TaskEnvironment, MAX_ITERS).unwrap();
        assert_eq!(stats.solved_with_reflection, 1);
        assert_eq!(recs[0].iterations, 2);
        assert!(!recs[0].reflection.is_empty());
        let t = recs[0].to_task().unwrap();
        assert!(tasks::grade(&t.answer, &tasks::solve(&t.question).unwrap()));
        assert!(curate_dataset(&[], &actor, &ScriptedReflector, &TaskEnvironment, 4).is_err());
    }
}
