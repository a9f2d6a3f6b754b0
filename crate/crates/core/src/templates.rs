//! Instruction templates for converting scenes into instruction tuning data.
//!
//! Placeholders: `{Question}`, `{Tag}`, `{Bbox}`, `{Option}` and
//! `{Tag & Bbox}`. The image itself is represented by the soft visual tokens
//! the pipeline always prepends, so templates carry text only.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    ImageCaptioning,
    Vqa,
    GroundedCaptioning,
    Rec,
    ReferentialDialogue,
    MultiChoiceVqa,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::ImageCaptioning,
        Task::Vqa,
        Task::GroundedCaptioning,
        Task::Rec,
        Task::ReferentialDialogue,
        Task::MultiChoiceVqa,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::ImageCaptioning => "caption",
            Task::Vqa => "vqa",
            Task::GroundedCaptioning => "grounded-caption",
            Task::Rec => "rec",
            Task::ReferentialDialogue => "referential-dialogue",
            Task::MultiChoiceVqa => "multi-choice-vqa",
        }
    }

    pub fn from_name(name: &str) -> Option<Task> {
        Task::ALL.iter().copied().find(|t| t.name() == name)
    }
}

pub const IMAGE_CAPTIONING: &[&str] = &[
    "Write a short description for the image.",
    "Write a description for the image.",
    "Provide a description of what is presented in the photo.",
    "Briefly describe the content of the image.",
    "Look at the image and describe what you see in a simple and clear manner.",
    "Could you use a few words to describe what you perceive in the photo?",
    "Please provide a short depiction of the picture.",
    "Summarize what this image depicts in a simple and concise manner.",
    "Provide a simple and clear description of the image, suitable for all audiences.",
];

pub const VQA: &[&str] = &[
    "{Question}",
    "Question: {Question}",
    "Question: {Question} Answer:",
    "Given the image, answer the following question: {Question}",
    "With the aid of the following image, offer a straightforward, short response to: {Question}.",
    "Based on the image, respond to this question with a short answer: {Question}. Answer:",
    "Use the provided image to answer the question as short as possible: {Question}",
    "What is the answer to the following question? {Question}",
    "Refer to the information in the image to provide a minimalist answer to: {Question}",
];

pub const GROUNDED_CAPTIONING: &[&str] = &[
    "Write a description for the target object in the image.",
    "Provide a short caption focusing on the highlighted object in this image.",
    "Describe the specific object indicated in the following image, keeping the description brief.",
    "Explain what the object marked in the image is, using a concise description.",
    "Identify and describe the key object in this image, using a short and clear description.",
];

pub const REC: &[&str] = &[
    "In the given image, could you find and tell me the coordinates of {Tag}?",
    "In the coordinate {Bbox} of the image, can you observe the object {Tag}.",
    "Locate the {Tag} in this image and provide a brief description of its position.",
    "Confirm the presence of {Tag} in the bounding box {Bbox} in the image.",
    "Search for {Tag} in the image and give its coordinates if found.",
    "Can you find the spatial location or coordinates of {Tag} in the image shown here?",
];

pub const REFERENTIAL_DIALOGUE: &[&str] = &[
    "Focus on the object {Tag & Bbox} in the image, and answer the question: {Question}.",
    "Could you provide a descriptive caption for the object {Tag & Bbox} in the image?",
    "Regarding the object specified as {Tag & Bbox}, please respond to: {Question}.",
    "Explain the features or details of the object identified by {Tag & Bbox} in the image.",
    "Create a caption that describes the area or object marked as {Tag & Bbox} in the image.",
    "Refer to the object {Tag & Bbox} in the image, and provide an answer to: {Question}.",
];

pub const MULTI_CHOICE_VQA: &[&str] = &[
    "Question: {Question} Options: {Option}. Answer:",
    "For the question: {Question}, choose the most suitable answer from options: {Option}.",
    "Examine the image and answer the question: {Question}. Your choices are: {Option}.",
    "Respond to the question: {Question} among options: {Option}, select your response:",
    "Consider the question: {Question} and options: {Option}. Please provide your answer:",
];

pub fn templates_for(task: Task) -> &'static [&'static str] {
    match task {
        Task::ImageCaptioning => IMAGE_CAPTIONING,
        Task::Vqa => VQA,
        Task::GroundedCaptioning => GROUNDED_CAPTIONING,
        Task::Rec => REC,
        Task::ReferentialDialogue => REFERENTIAL_DIALOGUE,
        Task::MultiChoiceVqa => MULTI_CHOICE_VQA,
    }
}

/// Stable identifier like `rec/0` for trace and dataset records.
pub fn template_id(task: Task, index: usize) -> String {
    format!("{}/{index}", task.name())
}

/// Every template word with placeholders stripped, lowercased; feeds the
/// closed vocabulary.
pub fn all_template_words() -> Vec<String> {
    let mut words = Vec::new();
    for task in Task::ALL {
        for t in templates_for(task) {
            let mut rest = *t;
            let mut clean = String::new();
            while let Some(open) = rest.find('{') {
                clean.push_str(&rest[..open]);
                match rest[open..].find('}') {
                    Some(close) => rest = &rest[open + close + 1..],
                    None => {
                        rest = "";
                        break;
                    }
                }
            }
            clean.push_str(rest);
            for w in clean.split(|c: char| !c.is_alphanumeric() && c != '-' && c != '\'') {
                if !w.is_empty() {
                    words.push(w.to_lowercase());
                }
            }
        }
    }
    words.sort();
    words.dedup();
    words
}
