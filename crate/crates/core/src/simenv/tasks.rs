//! Object classes and the pick-and-place task bank.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Phone,
    Gluestick,
    Marker,
    Rag,
    PencilBox,
    Charger,
    Hand,
    Plate,
    StorageBox,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 9] = [
        ObjectClass::Phone,
        ObjectClass::Gluestick,
        ObjectClass::Marker,
        ObjectClass::Rag,
        ObjectClass::PencilBox,
        ObjectClass::Charger,
        ObjectClass::Hand,
        ObjectClass::Plate,
        ObjectClass::StorageBox,
    ];

    /// Classes that appear in in-distribution scenes.
    pub const IN_DISTRIBUTION: [ObjectClass; 7] = [
        ObjectClass::Phone,
        ObjectClass::Gluestick,
        ObjectClass::Marker,
        ObjectClass::Rag,
        ObjectClass::PencilBox,
        ObjectClass::Charger,
        ObjectClass::Hand,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectClass::Phone => "phone",
            ObjectClass::Gluestick => "gluestick",
            ObjectClass::Marker => "marker",
            ObjectClass::Rag => "rag",
            ObjectClass::PencilBox => "pencil_box",
            ObjectClass::Charger => "charger",
            ObjectClass::Hand => "hand",
            ObjectClass::Plate => "plate",
            ObjectClass::StorageBox => "storage_box",
        }
    }

    /// Natural-language name used in instructions and reasoning text.
    pub fn display(&self) -> &'static str {
        match self {
            ObjectClass::PencilBox => "pencil box",
            ObjectClass::StorageBox => "storage box",
            other => other.name(),
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s || c.display() == s)
    }

    /// Raster channel index.
    pub fn channel(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }

    /// Bounding-box size in metres (x, y, z).
    pub fn extent(&self) -> [f64; 3] {
        match self {
            ObjectClass::Phone => [0.05, 0.09, 0.01],
            ObjectClass::Gluestick => [0.03, 0.08, 0.03],
            ObjectClass::Marker => [0.02, 0.10, 0.02],
            ObjectClass::Rag => [0.08, 0.08, 0.02],
            ObjectClass::PencilBox => [0.05, 0.12, 0.04],
            ObjectClass::Charger => [0.05, 0.05, 0.02],
            ObjectClass::Hand => [0.07, 0.10, 0.03],
            ObjectClass::Plate => [0.11, 0.11, 0.02],
            ObjectClass::StorageBox => [0.10, 0.10, 0.06],
        }
    }

    pub fn graspable(&self) -> bool {
        !matches!(self, ObjectClass::Hand)
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSplit {
    InDistribution,
    NovelObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub target_class: ObjectClass,
    pub goal_class: ObjectClass,
    /// Placement preposition, "on" or "in".
    pub relation: String,
    pub direct_instruction: String,
    /// Intention phrasings used for training data.
    pub intention_instructions: Vec<String>,
    /// Intention phrasings withheld from every training sample.
    pub heldout_instructions: Vec<String>,
    pub success_radius: f64,
    pub split: TaskSplit,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidTask(m));
        if self.intention_instructions.is_empty() {
            return bad(format!("{}: no intention instructions", self.name));
        }
        if self.target_class == self.goal_class {
            return bad(format!("{}: target equals goal", self.name));
        }
        if !self.target_class.graspable() {
            return bad(format!("{}: target is not graspable", self.name));
        }
        if !(self.success_radius > 0.0) {
            return bad(format!("{}: success radius must be positive", self.name));
        }
        let train: BTreeSet<&str> = self
            .intention_instructions
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.direct_instruction.as_str()))
            .collect();
        if let Some(h) = self
            .heldout_instructions
            .iter()
            .find(|h| train.contains(h.as_str()))
        {
            return bad(format!(
                "{}: held-out instruction also in training bank: {h}",
                self.name
            ));
        }
        Ok(())
    }

    /// The four scene entities named by the task, for the chain templates.
    pub fn goal_is_hand(&self) -> bool {
        self.goal_class == ObjectClass::Hand
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBank {
    pub tasks: Vec<TaskSpec>,
}

impl TaskBank {
    pub fn get(&self, name: &str) -> Result<&TaskSpec, SimError> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| SimError::UnknownTask(name.to_string()))
    }

    pub fn in_distribution(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks
            .iter()
            .filter(|t| t.split == TaskSplit::InDistribution)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !names.insert(t.name.as_str()) {
                return Err(SimError::InvalidTask(format!("duplicate task {}", t.name)));
            }
        }
        // Held-out phrasings must not leak into any task's training bank.
        let train: BTreeSet<&str> = self
            .tasks
            .iter()
            .filter(|t| t.split == TaskSplit::InDistribution)
            .flat_map(|t| {
                t.intention_instructions
                    .iter()
                    .map(String::as_str)
                    .chain(std::iter::once(t.direct_instruction.as_str()))
            })
            .collect();
        for t in &self.tasks {
            for h in &t.heldout_instructions {
                if train.iter().any(|s| s.contains(h.as_str())) {
                    return Err(SimError::InvalidTask(format!(
                        "held-out instruction leaks into training bank: {h}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(e.to_string()))?;
        let bank: Self = toml::from_str(&text).map_err(|e| SimError::Io(e.to_string()))?;
        bank.validate()?;
        Ok(bank)
    }

    /// Six in-distribution tasks and three novel-object tasks.
    pub fn standard() -> Self {
        use ObjectClass::*;
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let id = |name: &str,
                  target: ObjectClass,
                  goal: ObjectClass,
                  relation: &str,
                  intention: &[&str],
                  heldout: &[&str]| TaskSpec {
            name: name.to_string(),
            target_class: target,
            goal_class: goal,
            relation: relation.to_string(),
            direct_instruction: format!(
                "put the {} {} the {}",
                target.display(),
                relation,
                goal.display()
            ),
            intention_instructions: s(intention),
            heldout_instructions: s(heldout),
            success_radius: 0.03,
            split: TaskSplit::InDistribution,
        };
        let mut tasks = vec![
            id(
                "phone_on_hand",
                Phone,
                Hand,
                "on",
                &[
                    "i want to call my friend",
                    "i need to make a call",
                    "i am waiting for an important message",
                    "let me check my messages",
                ],
                &[
                    "i should ring my mother",
                    "i want to text my sister",
                    "someone is trying to reach me",
                    "i need to look at my screen",
                    "i want to send a photo",
                ],
            ),
            id(
                "gluestick_on_hand",
                Gluestick,
                Hand,
                "on",
                &[
                    "i need to stick these papers together",
                    "my poster needs some glue",
                    "i want to attach this photo",
                    "the paper keeps falling off",
                ],
                &[
                    "i am making a collage",
                    "help me fix this label",
                    "this envelope will not stay closed",
                    "i want to repair the torn page",
                    "i have to paste a picture in my notebook",
                ],
            ),
            id(
                "marker_on_hand",
                Marker,
                Hand,
                "on",
                &[
                    "i need to write something on the whiteboard",
                    "i want to draw a line",
                    "i have to label this box",
                    "let me highlight this note",
                ],
                &[
                    "i want to sketch a picture",
                    "i need to sign this card",
                    "i should mark the date on the calendar",
                    "help me color this drawing",
                    "i want to write my name",
                ],
            ),
            id(
                "phone_on_charger",
                Phone,
                Charger,
                "on",
                &[
                    "my phone is out of battery",
                    "my phone is almost dead",
                    "the phone needs more power",
                    "my phone battery is low",
                ],
                &[
                    "my screen keeps going dark",
                    "i will need my phone fully powered tonight",
                    "the phone shut down again",
                    "please top up my phone",
                    "my phone shows a red battery",
                ],
            ),
            id(
                "rag_on_hand",
                Rag,
                Hand,
                "on",
                &[
                    "i spilled some water",
                    "the table is dirty",
                    "i need to wipe my hands",
                    "there is dust everywhere",
                ],
                &[
                    "my coffee went everywhere",
                    "my fingers are sticky",
                    "i want to polish my glasses",
                    "the window is smudged",
                    "i need to dry this cup",
                ],
            ),
            id(
                "pencil_box_on_hand",
                PencilBox,
                Hand,
                "on",
                &[
                    "i need a pencil",
                    "i want to sharpen my pencils",
                    "where are my pens",
                    "i need my stationery",
                ],
                &[
                    "i have an exam to study for",
                    "i want to find my eraser",
                    "my bag has no pens in it",
                    "i need to pack for school",
                    "i want my ruler",
                ],
            ),
        ];
        let ood =
            |name: &str, target: ObjectClass, goal: ObjectClass, relation: &str, inst: &str| {
                let mut t = id(name, target, goal, relation, &[inst], &[inst]);
                // Every instruction of a novel-object task is unseen.
                t.heldout_instructions.clear();
                t.split = TaskSplit::NovelObject;
                t
            };
        tasks.push(ood(
            "marker_in_pencil_box",
            Marker,
            PencilBox,
            "in",
            "make sure the writing instrument is properly stored in its case",
        ));
        tasks.push(ood(
            "rag_on_plate",
            Rag,
            Plate,
            "on",
            "i need to clean the dish",
        ));
        tasks.push(ood(
            "gluestick_in_storage_box",
            Gluestick,
            StorageBox,
            "in",
            "return the adhesive tool to its storage box",
        ));
        Self { tasks }
    }
}
