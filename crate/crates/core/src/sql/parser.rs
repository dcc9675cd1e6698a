//! Lexer and recursive-descent parser for the query language:
//!
//! ```text
//! query      := SELECT select FROM ident (',' ident)?
//!               (WHERE comparison (AND comparison)*)? (GROUP BY name)? ';'?
//! select     := count '(' '*' ')' | ident '.' predict '(' '*' ')' | name (',' name)*
//! comparison := operand ('=' | '!=' | '<' | '<=' | '>' | '>=') operand
//! operand    := name | ident '.' predict '(' '*' ')' | literal
//! name       := ident ('.' ident)?
//! ```
//!
//! Keywords are case-insensitive. Token positions in errors are 1-based.

use super::ast::{CmpOp, Comparison, Literal, Name, Operand, Query, SelectList};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Keyword(Kw),
    Int(i64),
    Float(f64),
    Str(String),
    Sym(&'static str),
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kw {
    Select,
    From,
    Where,
    And,
    Group,
    By,
    True,
    False,
    Begin,
    Commit,
}

const KEYWORDS: [(&str, Kw); 10] = [
    ("select", Kw::Select),
    ("from", Kw::From),
    ("where", Kw::Where),
    ("and", Kw::And),
    ("group", Kw::Group),
    ("by", Kw::By),
    ("true", Kw::True),
    ("false", Kw::False),
    ("begin", Kw::Begin),
    ("commit", Kw::Commit),
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.iter().any(|(k, _)| word.eq_ignore_ascii_case(k))
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("identifier `{s}`"),
        Tok::Keyword(k) => format!("keyword {}", format!("{k:?}").to_uppercase()),
        Tok::Int(v) => format!("integer {v}"),
        Tok::Float(v) => format!("number {v}"),
        Tok::Str(_) => "string literal".into(),
        Tok::Sym(s) => format!("`{s}`"),
        Tok::End => "end of input".into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let mut out = Vec::new();
    let err = |line, column, token, message: String| Error::Syntax {
        line,
        column,
        token,
        message,
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let (start, start_col) = (i, col);
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            match KEYWORDS.iter().find(|(k, _)| word.eq_ignore_ascii_case(k)) {
                Some(&(_, kw)) => Tok::Keyword(kw),
                None => Tok::Ident(word),
            }
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit() || *d == '.')) {
            i += 1;
            let mut float = false;
            while i < chars.len() {
                let d = chars[i];
                if d.is_ascii_digit() {
                    i += 1;
                } else if d == '.' && !float {
                    float = true;
                    i += 1;
                } else if (d == 'e' || d == 'E')
                    && chars
                        .get(i + 1)
                        .is_some_and(|n| n.is_ascii_digit() || ((*n == '-' || *n == '+') && chars.get(i + 2).is_some_and(char::is_ascii_digit)))
                {
                    float = true;
                    i += 2;
                } else {
                    break;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let bad = || err(line, start_col, out.len() + 1, format!("malformed number `{s}`"));
            if float {
                Tok::Float(s.parse().map_err(|_| bad())?)
            } else {
                Tok::Int(s.parse().map_err(|_| bad())?)
            }
        } else if c == '\'' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(err(line, start_col, out.len() + 1, "unterminated string literal".into())),
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                        s.push('\'');
                        i += 2;
                    }
                    Some('\'') => {
                        i += 1;
                        break;
                    }
                    Some(&ch) => {
                        if ch == '\n' {
                            line += 1;
                        }
                        s.push(ch);
                        i += 1;
                    }
                }
            }
            Tok::Str(s)
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let sym = match two.as_str() {
                "!=" => Some("!="),
                "<>" => Some("!="),
                "<=" => Some("<="),
                ">=" => Some(">="),
                _ => None,
            };
            match sym {
                Some(s) => {
                    i += 2;
                    Tok::Sym(s)
                }
                None => {
                    i += 1;
                    Tok::Sym(match c {
                        '=' => "=",
                        '<' => "<",
                        '>' => ">",
                        '(' => "(",
                        ')' => ")",
                        '*' => "*",
                        ',' => ",",
                        '.' => ".",
                        ';' => ";",
                        other => {
                            return Err(err(line, start_col, out.len() + 1, format!("unexpected character `{other}`")));
                        }
                    })
                }
            }
        };
        col += i - start;
        out.push(Token {
            tok,
            line,
            column: start_col,
        });
    }
    out.push(Token { tok: Tok::End, line, column: col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn error(&self, message: impl Into<String>) -> Error {
        let t = &self.toks[self.pos];
        Error::Syntax {
            line: t.line,
            column: t.column,
            token: self.pos + 1,
            message: message.into(),
        }
    }

    fn expected(&self, what: &str) -> Error {
        self.error(format!("expected {what}, found {}", describe(self.peek())))
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Tok::Sym(x) if *x == s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.expected(&format!("`{s}`")))
        }
    }

    fn eat_kw(&mut self, kw: Kw) -> bool {
        if *self.peek() == Tok::Keyword(kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: Kw) -> Result<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.expected(&format!("{kw:?}").to_uppercase()))
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.peek() {
            Tok::Ident(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.expected("identifier")),
        }
    }

    fn is_predict_call(&self) -> bool {
        matches!(self.peek(), Tok::Ident(_))
            && matches!(self.peek_at(1), Tok::Sym("."))
            && matches!(self.peek_at(2), Tok::Ident(p) if p.eq_ignore_ascii_case("predict"))
            && matches!(self.peek_at(3), Tok::Sym("("))
    }

    fn predict_call(&mut self) -> Result<String> {
        let model = self.ident()?;
        self.expect_sym(".")?;
        self.ident()?;
        self.expect_sym("(")?;
        self.expect_sym("*")?;
        self.expect_sym(")")?;
        Ok(model)
    }

    fn name(&mut self) -> Result<Name> {
        let first = self.ident()?;
        if self.eat_sym(".") {
            Ok(Name::qualified(first, self.ident()?))
        } else {
            Ok(Name::bare(first))
        }
    }

    fn query(&mut self) -> Result<Query> {
        match self.peek() {
            Tok::Keyword(Kw::Begin) | Tok::Keyword(Kw::Commit) => {
                return Err(Error::Unsupported("transactions (BEGIN/COMMIT) are not supported".into()));
            }
            _ => {}
        }
        self.expect_kw(Kw::Select)?;
        let select = if matches!(self.peek(), Tok::Ident(c) if c.eq_ignore_ascii_case("count"))
            && matches!(self.peek_at(1), Tok::Sym("("))
        {
            self.bump();
            self.expect_sym("(")?;
            self.expect_sym("*")?;
            self.expect_sym(")")?;
            SelectList::CountStar
        } else if self.is_predict_call() {
            SelectList::Predict(self.predict_call()?)
        } else {
            let mut cols = vec![self.name().map_err(|_| self.expected("select list"))?];
            while self.eat_sym(",") {
                cols.push(self.name()?);
            }
            SelectList::Columns(cols)
        };
        self.expect_kw(Kw::From)?;
        let mut from = vec![self.ident()?];
        if self.eat_sym(",") {
            from.push(self.ident()?);
        }
        let mut filters = Vec::new();
        if self.eat_kw(Kw::Where) {
            filters.push(self.comparison()?);
            while self.eat_kw(Kw::And) {
                filters.push(self.comparison()?);
            }
        }
        let group_by = if self.eat_kw(Kw::Group) {
            self.expect_kw(Kw::By)?;
            Some(self.name()?)
        } else {
            None
        };
        self.eat_sym(";");
        if *self.peek() != Tok::End {
            return Err(self.expected("end of query"));
        }
        Ok(Query {
            select,
            from,
            filters,
            group_by,
        })
    }

    fn comparison(&mut self) -> Result<Comparison> {
        let left = self.operand()?;
        let op = match self.peek() {
            Tok::Sym("=") => CmpOp::Eq,
            Tok::Sym("!=") => CmpOp::Ne,
            Tok::Sym("<") => CmpOp::Lt,
            Tok::Sym("<=") => CmpOp::Le,
            Tok::Sym(">") => CmpOp::Gt,
            Tok::Sym(">=") => CmpOp::Ge,
            _ => return Err(self.expected("comparison operator")),
        };
        self.bump();
        let right = self.operand()?;
        Ok(Comparison { left, op, right })
    }

    fn operand(&mut self) -> Result<Operand> {
        let lit = match self.peek() {
            Tok::Int(v) => Some(Literal::Int(*v)),
            Tok::Float(v) => Some(Literal::Float(*v)),
            Tok::Str(s) => Some(Literal::Str(s.clone())),
            Tok::Keyword(Kw::True) => Some(Literal::Bool(true)),
            Tok::Keyword(Kw::False) => Some(Literal::Bool(false)),
            _ => None,
        };
        if let Some(l) = lit {
            self.bump();
            return Ok(Operand::Literal(l));
        }
        if self.is_predict_call() {
            return Ok(Operand::Predict(self.predict_call()?));
        }
        match self.peek() {
            Tok::Ident(_) => Ok(Operand::Column(self.name()?)),
            _ => Err(self.expected("column, literal or predict(*)")),
        }
    }
}

pub fn parse_query(text: &str) -> Result<Query> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.query()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn listing_style_count() {
        let q = parse_query(
            "SELECT count(*) FROM transactions WHERE fraud_dnn.predict(*) = True GROUP BY created_on",
        )
        .unwrap();
        assert_eq!(q.select, SelectList::CountStar);
        assert_eq!(q.from, vec!["transactions"]);
        assert_eq!(
            q.filters,
            vec![Comparison {
                left: Operand::Predict("fraud_dnn".into()),
                op: CmpOp::Eq,
                right: Operand::Literal(Literal::Bool(true)),
            }]
        );
        assert_eq!(q.group_by, Some(Name::bare("created_on")));
    }

    #[test]
    fn listing_style_join() {
        let q = parse_query(
            "select fraud_dnn.predict(*) from transactions, customers\n where transactions.customer_id = customers.id and amount >= 10.5",
        )
        .unwrap();
        assert_eq!(q.select, SelectList::Predict("fraud_dnn".into()));
        assert_eq!(q.from.len(), 2);
        assert_eq!(q.filters[0].right, Operand::Column(Name::qualified("customers", "id")));
        assert_eq!(q.filters[1].right, Operand::Literal(Literal::Float(10.5)));
    }

    #[test]
    fn minimal_query() {
        let q = parse_query("SELECT count(*) FROM t").unwrap();
        assert_eq!(q.to_string(), "SELECT count(*) FROM t");
    }

    #[test]
    fn missing_select_list_reports_token_two() {
        match parse_query("SELECT FROM") {
            Err(Error::Syntax { line, column, token, .. }) => assert_eq!((line, column, token), (1, 8, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_positions_span_lines() {
        match parse_query("SELECT a\nFROM t\nWHERE a = = 3") {
            Err(Error::Syntax { line, column, token, .. }) => assert_eq!((line, column, token), (3, 11, 8)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transactions_are_unsupported() {
        assert!(matches!(parse_query("BEGIN"), Err(Error::Unsupported(_))));
        assert!(matches!(parse_query("commit;"), Err(Error::Unsupported(_))));
    }

    #[test]
    fn literals_and_operators() {
        let q = parse_query("SELECT a, t.b FROM t WHERE a != -3 AND b <> 'it''s' AND c < 1e3 AND d <= -0.5 AND e > FALSE").unwrap();
        let rights: Vec<_> = q.filters.iter().map(|c| (c.op, c.right.clone())).collect();
        assert_eq!(
            rights,
            vec![
                (CmpOp::Ne, Operand::Literal(Literal::Int(-3))),
                (CmpOp::Ne, Operand::Literal(Literal::Str("it's".into()))),
                (CmpOp::Lt, Operand::Literal(Literal::Float(1000.0))),
                (CmpOp::Le, Operand::Literal(Literal::Float(-0.5))),
                (CmpOp::Gt, Operand::Literal(Literal::Bool(false))),
            ]
        );
    }

    #[test]
    fn trailing_garbage_rejected() {
        assert!(matches!(parse_query("SELECT a FROM t t2"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_query("SELECT a FROM t WHERE 'x"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_query("SELECT a FROM t WHERE a ? 1"), Err(Error::Syntax { .. })));
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z_][a-z0-9_]{0,6}".prop_filter("keyword", |s| !is_keyword(s) && s != "count" && s != "predict")
    }

    fn name() -> impl Strategy<Value = Name> {
        (proptest::option::of(ident()), ident()).prop_map(|(qualifier, name)| Name { qualifier, name })
    }

    fn literal() -> impl Strategy<Value = Literal> {
        prop_oneof![
            any::<i64>().prop_map(Literal::Int),
            (-1e12f64..1e12).prop_map(Literal::Float),
            "[ -~]{0,8}".prop_map(Literal::Str),
            any::<bool>().prop_map(Literal::Bool),
        ]
    }

    fn operand() -> impl Strategy<Value = Operand> {
        prop_oneof![
            name().prop_map(Operand::Column),
            ident().prop_map(Operand::Predict),
            literal().prop_map(Operand::Literal),
        ]
    }

    fn op() -> impl Strategy<Value = CmpOp> {
        prop_oneof![
            Just(CmpOp::Eq),
            Just(CmpOp::Ne),
            Just(CmpOp::Lt),
            Just(CmpOp::Le),
            Just(CmpOp::Gt),
            Just(CmpOp::Ge)
        ]
    }

    fn query() -> impl Strategy<Value = Query> {
        let select = prop_oneof![
            Just(SelectList::CountStar),
            ident().prop_map(SelectList::Predict),
            proptest::collection::vec(name(), 1..4).prop_map(SelectList::Columns),
        ];
        let cmp = (operand(), op(), operand()).prop_map(|(left, op, right)| Comparison { left, op, right });
        (
            select,
            proptest::collection::vec(ident(), 1..=2),
            proptest::collection::vec(cmp, 0..4),
            proptest::option::of(name()),
        )
            .prop_map(|(select, from, filters, group_by)| Query {
                select,
                from,
                filters,
                group_by,
            })
    }

    proptest! {
        #[test]
        fn render_parse_fixpoint(q in query()) {
            let text = q.to_string();
            let back = parse_query(&text).unwrap();
            prop_assert_eq!(&back, &q);
            prop_assert_eq!(back.to_string(), text);
        }
    }
}
