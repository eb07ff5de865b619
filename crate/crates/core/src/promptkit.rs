//! Prompt assembly: task description, then `k` demonstrations, then the
//! input sentence, separated by blank lines.
//!
//! ```
//! use pico_icl::promptkit::{assemble_prompt, PromptSpec};
//!
//! let spec = PromptSpec::new("Extract PICO elements.", vec![], "Aspirin in adults").unwrap();
//! assert_eq!(assemble_prompt(&spec), "Extract PICO elements.\n\ninput: Aspirin in adults\noutput:\n");
//! ```

use thiserror::Error;

use crate::instructgen::InstructRecord;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt declares k = {k} but carries {found} demonstrations")]
    CountMismatch { k: usize, found: usize },
    #[error("prompt is {len} characters, over the {max} character limit")]
    TooLong { len: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub task_description: String,
    /// Most similar first.
    pub demonstrations: Vec<InstructRecord>,
    pub input_text: String,
    pub k: usize,
}

impl PromptSpec {
    pub fn new(
        task_description: impl Into<String>,
        demonstrations: Vec<InstructRecord>,
        input_text: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let k = demonstrations.len();
        PromptSpec { task_description: task_description.into(), demonstrations, input_text: input_text.into(), k }
            .validated()
    }

    fn validated(self) -> Result<Self, PromptError> {
        if self.demonstrations.len() != self.k {
            return Err(PromptError::CountMismatch { k: self.k, found: self.demonstrations.len() });
        }
        Ok(self)
    }
}

pub fn render_demonstration(r: &InstructRecord) -> String {
    format!("input: {}\noutput:\n{}", r.input, r.output)
}

/// Render the prompt. Byte-deterministic in its input.
pub fn assemble_prompt(spec: &PromptSpec) -> String {
    let mut out = String::with_capacity(
        spec.task_description.len()
            + spec.input_text.len()
            + spec.demonstrations.iter().map(|d| d.input.len() + d.output.len() + 20).sum::<usize>()
            + 20,
    );
    out.push_str(&spec.task_description);
    out.push_str("\n\n");
    for demo in &spec.demonstrations {
        out.push_str(&render_demonstration(demo));
        out.push_str("\n\n");
    }
    out.push_str("input: ");
    out.push_str(&spec.input_text);
    out.push_str("\noutput:\n");
    out
}

/// [`assemble_prompt`] with a character budget.
pub fn assemble_prompt_checked(spec: &PromptSpec, max_chars: Option<usize>) -> Result<String, PromptError> {
    let spec = spec.clone().validated()?;
    let prompt = assemble_prompt(&spec);
    if let Some(max) = max_chars {
        let len = prompt.chars().count();
        if len > max {
            return Err(PromptError::TooLong { len, max });
        }
    }
    Ok(prompt)
}

/// Number of demonstration blocks in a prompt produced by
/// [`assemble_prompt`]: every `input:` line except the final one.
pub fn count_demonstrations(prompt: &str) -> usize {
    prompt.lines().filter(|l| l.starts_with("input: ")).count().saturating_sub(1)
}

/// The text after the final `input:` marker, up to its `output:` line.
pub fn final_input(prompt: &str) -> Option<&str> {
    let start = prompt.rfind("input: ")? + "input: ".len();
    let rest = &prompt[start..];
    Some(rest.find("\noutput:").map_or(rest, |end| &rest[..end]))
}
