//! The ten semantically equivalent prompt templates used to shuffle
//! phrasing. Template 0 is the vanilla prompt. `<OPTIONS>` is replaced
//! by the four option lines at render time.

pub const TEMPLATE_COUNT: usize = 10;

pub(crate) const OPTIONS_MARKER: &str = "<OPTIONS>";

pub(crate) const TEMPLATES: [&str; TEMPLATE_COUNT] = [
    // 0: vanilla
    "You are given an image and a set of descriptions. Your task is to evaluate each description and determine whether it is true based on the image.\n\nBelow are the descriptions:\n\n<OPTIONS>\n\nProvide one index of the descriptions that are true, regardless of the number of descriptions that you believe are true. Return your response as a single index without any additional explanations or text. Here is an example format for your response:\n\n0\n\nUse the provided format and structure for your response.",
    // 1
    "You are presented with an image and a list of descriptions. Your task is to assess each description and judge if it is true based on the image.\n\nThe descriptions are listed below:\n\n<OPTIONS>\n\nIndicate one index of the descriptions that are true, regardless of how many you think are correct. Return your response as a single index without any additional explanations or text. Here is an example format for your response:\n\n0\n\nUse the provided format and structure for your response.",
    // 2
    "You have an image and several descriptions. Your task is to evaluate each description and determine its validity based on the image.\n\nBelow are the descriptions:\n\n<OPTIONS>\n\nList one index of the descriptions that are true, even if multiple descriptions seem accurate. Return your response as a single index without any additional explanations or text. Here is an example format for your response:\n\n0\n\nUse the provided format and structure for your response.",
    // 3
    "Given an image and a set of descriptions, your task is to evaluate each description and determine if it is true based on the image.\n\nHere are the descriptions:\n\n<OPTIONS>\n\nProvide one index of the descriptions that are true, even if multiple descriptions are accurate. Respond with a single index without any additional explanations or text. Here is an example format for your response:\n\n0\n\nUse the provided format and structure for your response.",
    // 4
    "You have an image and a series of descriptions. Your task is to evaluate each description to determine its truthfulness based on the image.\n\nBelow are the descriptions:\n\n<OPTIONS>\n\nIndicate one index of the true descriptions, even if there are multiple true descriptions. Return your response as a single index without any additional explanations or text. Here is an example format for your response:\n\n0\n\nUse the provided format and structure for your response.",
    // 5
    "Given an image and several descriptions, your task is to evaluate each description and determine whether it is true based on the image.\n\nHere are the descriptions:\n\n<OPTIONS>\n\nProvide one index of the true descriptions, even if multiple descriptions are valid. Return your response as a single index without any additional explanations or text. Here is an example of how your response should look:\n\n0\n\nUse the provided format and structure for your response.",
    // 6
    "You are provided with an image and a series of descriptions. Evaluate each description to determine if it is true based on the image.\n\nBelow are the descriptions:\n\n<OPTIONS>\n\nProvide one index of the descriptions that are true, even if there are multiple descriptions that seem valid. Return your response as a single index without any additional explanations or text. Here is an example format for your response:\n\n0\n\nUse the provided format and structure for your response.",
    // 7
    "Your task is to evaluate an image and a set of descriptions to determine if each description is true based on the image.\n\nHere are the descriptions:\n\n<OPTIONS>\n\nProvide an index of the true description(s), even if multiple descriptions seem correct. Return your response as a single index without any additional explanations or text. Here is an example format for your response:\n\n0\n\nUse the provided format and structure for your response.",
    // 8
    "You have been given an image and a list of descriptions. Your task is to evaluate each description and determine if it is true based on the image.\n\nThe descriptions are as follows:\n\n<OPTIONS>\n\nProvide one index of the descriptions that are true, even if you think more than one description is correct. Return your response as a single index without any additional explanations or text. Here is an example format for your response:\n\n0\n\nUse the provided format and structure for your response.",
    // 9
    "You've been presented with an image alongside a series of descriptions. Your objective is to assess each description to determine its accuracy based on the image.\n\nThe descriptions are listed below:\n\n<OPTIONS>\n\nYou need to identify one description that is true, regardless of how many you think are correct. Please format your response as a single index without any additional explanations or text. Here is an example of how your response should look:\n\n0\n\nEnsure you adhere to this format and structure in your response..",
];

/// Raw template text (with the `<OPTIONS>` marker left in place).
pub fn template_text(template_id: usize) -> Option<&'static str> {
    TEMPLATES.get(template_id).copied()
}

pub(crate) fn fill(template_id: usize, option_block: &str) -> String {
    TEMPLATES[template_id].replace(OPTIONS_MARKER, option_block)
}
