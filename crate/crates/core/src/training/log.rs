use std::io::Write;

use serde::{Deserialize, Serialize};

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Step {
        stage: String,
        epoch: usize,
        step: usize,
        loss: f64,
        /// RL only.
        reward_sample: Option<f64>,
        reward_baseline: Option<f64>,
        entropy: Option<f64>,
    },
    Skipped {
        stage: String,
        step: usize,
        reason: String,
    },
    Validation {
        stage: String,
        index: usize,
        step: usize,
        /// TF monitor.
        loss: Option<f64>,
        /// RL monitor.
        label_macro_f1: Option<f64>,
        er_f1: Option<f64>,
        /// Mean sampled-rollout entropy since the previous event.
        rollout_entropy: Option<f64>,
    },
    Done {
        stage: String,
        steps: usize,
        skipped: usize,
        best_index: usize,
        best_value: f64,
    },
}

/// Keeps every event in memory and mirrors it to an optional writer.
#[derive(Default)]
pub struct EventLog {
    pub events: Vec<TrainEvent>,
    sink: Option<Box<dyn Write>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_writer(sink: Box<dyn Write>) -> Self {
        Self {
            events: Vec::new(),
            sink: Some(sink),
        }
    }

    pub fn push(&mut self, event: TrainEvent) -> std::io::Result<()> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &event)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn validations(&self) -> impl Iterator<Item = &TrainEvent> {
        self.events
            .iter()
            .filter(|e| matches!(e, TrainEvent::Validation { .. }))
    }
}
