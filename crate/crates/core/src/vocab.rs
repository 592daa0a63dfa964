//! Closed word-level vocabulary for the toy QA task.
//!
//! Two fixed templates cover every sequence the pipeline produces:
//! the presence question `is there a/an <class> in the image ?` and the
//! probe question `what is it in the image ?`. Class labels map onto a
//! contiguous token block starting at [`CLASS_BASE`].

pub type TokenId = usize;
pub type ClassId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const YES: TokenId = 3;
pub const NO: TokenId = 4;
pub const IS: TokenId = 5;
pub const THERE: TokenId = 6;
pub const A_AN: TokenId = 7;
pub const IN: TokenId = 8;
pub const THE: TokenId = 9;
pub const IMAGE: TokenId = 10;
pub const QMARK: TokenId = 11;
pub const WHAT: TokenId = 12;
pub const IT: TokenId = 13;

/// First class token; class `c` is token `CLASS_BASE + c`.
pub const CLASS_BASE: TokenId = 14;

/// Smallest vocabulary size that can host `class_count` classes.
pub fn required_vocab(class_count: usize) -> usize {
    CLASS_BASE + class_count
}

pub fn class_token(class: ClassId) -> TokenId {
    CLASS_BASE + class
}

/// "is there a/an <class> in the image ?" (8 tokens)
pub fn presence_question(class: ClassId) -> Vec<TokenId> {
    vec![IS, THERE, A_AN, class_token(class), IN, THE, IMAGE, QMARK]
}

/// "what is it in the image ?" (7 tokens)
pub fn probe_question() -> Vec<TokenId> {
    vec![WHAT, IS, IT, IN, THE, IMAGE, QMARK]
}

/// The object answer appended after the probe question.
pub fn object_answer(class: ClassId) -> Vec<TokenId> {
    vec![class_token(class)]
}

/// Readable token name for dumps and error messages.
pub fn token_name(token: TokenId) -> String {
    match token {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        YES => "yes".into(),
        NO => "no".into(),
        IS => "is".into(),
        THERE => "there".into(),
        A_AN => "a/an".into(),
        IN => "in".into(),
        THE => "the".into(),
        IMAGE => "image".into(),
        QMARK => "?".into(),
        WHAT => "what".into(),
        IT => "it".into(),
        c => format!("class_{:02}", c - CLASS_BASE),
    }
}
