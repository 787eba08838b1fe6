//! Minimal positioned YAML tree built from the `yaml-rust2` event stream.
//! Plain `Yaml` values drop source positions, which the schema errors need.

use yaml_rust2::parser::{Event, MarkedEventReceiver, Parser};
use yaml_rust2::scanner::{Marker, TScalarStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl From<Marker> for Pos {
    fn from(m: Marker) -> Self {
        // yaml-rust2 columns are 0-based.
        Pos {
            line: m.line(),
            col: m.col() + 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Node {
    Scalar {
        value: String,
        style: TScalarStyle,
        pos: Pos,
    },
    Seq {
        items: Vec<Node>,
        pos: Pos,
    },
    Map {
        entries: Vec<(Node, Node)>,
        pos: Pos,
    },
    Alias {
        pos: Pos,
    },
}

impl Node {
    pub fn pos(&self) -> Pos {
        match self {
            Node::Scalar { pos, .. }
            | Node::Seq { pos, .. }
            | Node::Map { pos, .. }
            | Node::Alias { pos } => *pos,
        }
    }

    /// Plain `~`, `null` or empty scalar.
    pub fn is_null(&self) -> bool {
        matches!(self, Node::Scalar { value, style: TScalarStyle::Plain, .. }
            if value.is_empty() || value == "~" || value == "null" || value == "Null" || value == "NULL")
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Node::Scalar { value, .. } if !self.is_null() => Some(value),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Node::Scalar { .. } if self.is_null() => "null",
            Node::Scalar { .. } => "scalar",
            Node::Seq { .. } => "sequence",
            Node::Map { .. } => "mapping",
            Node::Alias { .. } => "alias",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message} at line {line}, column {col}")]
pub struct YamlError {
    pub message: String,
    pub line: usize,
    pub col: usize,
}

enum Frame {
    Seq(Vec<Node>, Pos),
    Map(Vec<(Node, Node)>, Option<Node>, Pos),
}

#[derive(Default)]
struct TreeBuilder {
    stack: Vec<Frame>,
    docs: Vec<Node>,
}

impl TreeBuilder {
    fn push_node(&mut self, node: Node) {
        match self.stack.last_mut() {
            None => self.docs.push(node),
            Some(Frame::Seq(items, _)) => items.push(node),
            Some(Frame::Map(entries, pending, _)) => match pending.take() {
                None => *pending = Some(node),
                Some(key) => entries.push((key, node)),
            },
        }
    }
}

impl MarkedEventReceiver for TreeBuilder {
    fn on_event(&mut self, ev: Event, mark: Marker) {
        let pos = Pos::from(mark);
        match ev {
            Event::Scalar(value, style, _, _) => self.push_node(Node::Scalar { value, style, pos }),
            Event::Alias(_) => self.push_node(Node::Alias { pos }),
            Event::SequenceStart(_, _) => self.stack.push(Frame::Seq(Vec::new(), pos)),
            Event::MappingStart(_, _) => self.stack.push(Frame::Map(Vec::new(), None, pos)),
            Event::SequenceEnd => {
                if let Some(Frame::Seq(items, pos)) = self.stack.pop() {
                    self.push_node(Node::Seq { items, pos });
                }
            }
            Event::MappingEnd => {
                if let Some(Frame::Map(entries, _, pos)) = self.stack.pop() {
                    self.push_node(Node::Map { entries, pos });
                }
            }
            _ => {}
        }
    }
}

/// Parse a single YAML document. An empty stream yields a null scalar.
pub fn load(text: &str) -> Result<Node, YamlError> {
    let mut builder = TreeBuilder::default();
    let mut parser = Parser::new_from_str(text);
    parser.load(&mut builder, true).map_err(|e| {
        let m = e.marker();
        YamlError {
            message: e.info().to_string(),
            line: m.line(),
            col: m.col() + 1,
        }
    })?;
    match builder.docs.len() {
        0 => Ok(Node::Scalar {
            value: String::new(),
            style: TScalarStyle::Plain,
            pos: Pos { line: 1, col: 1 },
        }),
        1 => Ok(builder.docs.pop().expect("one document")),
        _ => Err(YamlError {
            message: "expected a single YAML document".into(),
            line: builder.docs[1].pos().line,
            col: builder.docs[1].pos().col,
        }),
    }
}
